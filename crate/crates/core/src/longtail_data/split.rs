use serde::{Deserialize, Serialize};

/// Classes with more than this many training samples are "many".
pub const MANY_ABOVE: usize = 100;
/// Classes with fewer than this many training samples are "few".
pub const FEW_BELOW: usize = 20;

/// Partition of the classes by training-set frequency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitGroup {
    Many,
    Medium,
    Few,
}

impl ClassSplit {
    pub fn group_of(&self, class: usize) -> Option<SplitGroup> {
        if self.many.contains(&class) {
            Some(SplitGroup::Many)
        } else if self.medium.contains(&class) {
            Some(SplitGroup::Medium)
        } else if self.few.contains(&class) {
            Some(SplitGroup::Few)
        } else {
            None
        }
    }

    pub fn num_classes(&self) -> usize {
        self.many.len() + self.medium.len() + self.few.len()
    }
}

/// many: count > 100, medium: 20..=100, few: count < 20.
pub fn split_classes(counts: &[usize]) -> ClassSplit {
    let mut split = ClassSplit {
        many: Vec::new(),
        medium: Vec::new(),
        few: Vec::new(),
    };
    for (c, &n) in counts.iter().enumerate() {
        if n > MANY_ABOVE {
            split.many.push(c);
        } else if n >= FEW_BELOW {
            split.medium.push(c);
        } else {
            split.few.push(c);
        }
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longtail_data::{build_profile, ProfileKind};

    #[test]
    fn three_way_split() {
        let s = split_classes(&[5000, 60, 5]);
        assert_eq!(s.many, [0]);
        assert_eq!(s.medium, [1]);
        assert_eq!(s.few, [2]);
    }

    #[test]
    fn boundaries_are_inclusive_for_medium() {
        let s = split_classes(&[100; 4]);
        assert_eq!(s.medium, [0, 1, 2, 3]);
        let s = split_classes(&[101, 20, 19]);
        assert_eq!((s.many.as_slice(), s.medium.as_slice(), s.few.as_slice()), (&[0][..], &[1][..], &[2][..]));
    }

    #[test]
    fn few_set_from_profile() {
        let counts = build_profile(10, 5000, 100.0, ProfileKind::Exponential).unwrap();
        let s = split_classes(&counts);
        let expected: Vec<usize> = (0..10).filter(|&c| counts[c] < 20).collect();
        assert_eq!(s.few, expected);
        assert_eq!(s.num_classes(), 10);
    }
}
