use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the per-class count decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    /// `n_max · IF^(-c/(C-1))`.
    Exponential,
    /// First half of the classes at `n_max`, the rest at `n_max / IF`.
    Step,
}

impl std::str::FromStr for ProfileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(Self::Exponential),
            "step" => Ok(Self::Step),
            other => Err(Error::invalid(format!("unknown profile kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceProfile {
    pub num_classes: usize,
    pub n_max: usize,
    pub imbalance_factor: f64,
    pub kind: ProfileKind,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

impl ImbalanceProfile {
    pub fn new(num_classes: usize, n_max: usize, imbalance_factor: f64, kind: ProfileKind) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("profile needs at least one class"));
        }
        if !(imbalance_factor.is_finite() && imbalance_factor >= 1.0) {
            return Err(Error::invalid(format!(
                "imbalance factor must be finite and >= 1, got {imbalance_factor}"
            )));
        }
        if (n_max as f64) < imbalance_factor {
            return Err(Error::invalid(format!(
                "n_max {n_max} is smaller than the imbalance factor {imbalance_factor}"
            )));
        }
        Ok(Self {
            num_classes,
            n_max,
            imbalance_factor,
            kind,
        })
    }

    /// Per-class counts, non-increasing in the class index, each at least 1.
    pub fn counts(&self) -> Vec<usize> {
        let c = self.num_classes;
        let nmax = self.n_max as f64;
        (0..c)
            .map(|i| {
                let raw = match self.kind {
                    ProfileKind::Exponential if c == 1 => nmax,
                    ProfileKind::Exponential => {
                        nmax * self.imbalance_factor.powf(-(i as f64) / (c - 1) as f64)
                    }
                    ProfileKind::Step if i < c.div_ceil(2) => nmax,
                    ProfileKind::Step => nmax / self.imbalance_factor,
                };
                round_half_up(raw).max(1)
            })
            .collect()
    }
}

/// Per-class counts for `(C, n_max, IF, kind)`.
pub fn build_profile(num_classes: usize, n_max: usize, imbalance_factor: f64, kind: ProfileKind) -> Result<Vec<usize>> {
    Ok(ImbalanceProfile::new(num_classes, n_max, imbalance_factor, kind)?.counts())
}

/// `max(counts) / min(counts)` after rounding.
pub fn realized_imbalance(counts: &[usize]) -> f64 {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    if min == 0 {
        return f64::INFINITY;
    }
    max as f64 / min as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_endpoints() {
        let c = build_profile(10, 5000, 100.0, ProfileKind::Exponential).unwrap();
        assert_eq!(c[0], 5000);
        assert_eq!(c[9], 50);
        assert!(c.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn balanced_limit() {
        let c = build_profile(7, 300, 1.0, ProfileKind::Exponential).unwrap();
        assert!(c.iter().all(|&n| n == 300));
        let c = build_profile(7, 300, 1.0, ProfileKind::Step).unwrap();
        assert!(c.iter().all(|&n| n == 300));
    }

    #[test]
    fn step_profile() {
        let c = build_profile(10, 5000, 100.0, ProfileKind::Step).unwrap();
        assert_eq!(c, [5000, 5000, 5000, 5000, 5000, 50, 50, 50, 50, 50]);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(build_profile(10, 50, 0.5, ProfileKind::Exponential).is_err());
        assert!(build_profile(10, 50, 100.0, ProfileKind::Exponential).is_err());
        assert!(build_profile(0, 50, 2.0, ProfileKind::Exponential).is_err());
        assert!(build_profile(10, 50, f64::NAN, ProfileKind::Exponential).is_err());
    }

    #[test]
    fn single_class() {
        assert_eq!(build_profile(1, 40, 4.0, ProfileKind::Exponential).unwrap(), [40]);
    }
}
