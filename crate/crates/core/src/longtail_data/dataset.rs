use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layout of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SampleShape {
    Vector { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl SampleShape {
    pub fn numel(&self) -> usize {
        match *self {
            SampleShape::Vector { dim } => dim,
            SampleShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

/// Labeled samples stored contiguously, one row of `shape.numel()` scalars per
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailDataset {
    pub shape: SampleShape,
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    pub seed: u64,
}

impl LongTailDataset {
    pub fn new(shape: SampleShape, data: Vec<f64>, labels: Vec<usize>, num_classes: usize, seed: u64) -> Result<Self> {
        if data.len() != labels.len() * shape.numel() {
            return Err(Error::invalid(format!(
                "{} scalars for {} samples of {} values",
                data.len(),
                labels.len(),
                shape.numel()
            )));
        }
        let mut counts = vec![0; num_classes];
        for &l in &labels {
            if l >= num_classes {
                return Err(Error::invalid(format!("label {l} out of range for {num_classes} classes")));
            }
            counts[l] += 1;
        }
        Ok(Self {
            shape,
            data,
            labels,
            counts,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.shape.numel();
        &self.data[i * d..(i + 1) * d]
    }

    /// Indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut idx = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            idx[l].push(i);
        }
        idx
    }

    /// Copy with every label mapped through `perm`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let labels = self.labels.iter().map(|&l| perm[l]).collect();
        Self::new(self.shape, self.data.clone(), labels, self.num_classes(), self.seed)
    }
}

/// Isotropic Gaussian mixture with one component per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub means: Vec<Vec<f64>>,
    pub stdev: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(means: Vec<Vec<f64>>, stdev: f64, seed: u64) -> Result<Self> {
        let num_classes = means.len();
        let input_dim = means.first().map_or(0, Vec::len);
        if num_classes == 0 || input_dim == 0 || means.iter().any(|m| m.len() != input_dim) {
            return Err(Error::invalid("mixture means must be non-empty and equally long"));
        }
        if !(stdev > 0.0 && stdev.is_finite()) {
            return Err(Error::invalid(format!("stdev must be positive, got {stdev}")));
        }
        for i in 0..num_classes {
            for j in i + 1..num_classes {
                if means[i] == means[j] {
                    return Err(Error::invalid(format!("classes {i} and {j} share a mean")));
                }
            }
        }
        Ok(Self {
            num_classes,
            input_dim,
            means,
            stdev,
            seed,
        })
    }

    /// Class means built from a small vocabulary of shared part vectors: each
    /// class sums `parts_per_class` distinct parts, so head and tail classes
    /// overlap in structure. Parts are unit-norm directions scaled by `scale`.
    pub fn shared_parts(
        num_classes: usize,
        input_dim: usize,
        num_parts: usize,
        parts_per_class: usize,
        scale: f64,
        stdev: f64,
        seed: u64,
    ) -> Result<Self> {
        if parts_per_class == 0 || parts_per_class > num_parts {
            return Err(Error::invalid("parts_per_class must be in 1..=num_parts"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let parts: Vec<Vec<f64>> = (0..num_parts)
            .map(|_| {
                let v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| scale * x / norm).collect()
            })
            .collect();
        let mut used: Vec<Vec<usize>> = Vec::new();
        let mut means = Vec::with_capacity(num_classes);
        let mut order: Vec<usize> = (0..num_parts).collect();
        while means.len() < num_classes {
            order.shuffle(&mut rng);
            let mut pick = order[..parts_per_class].to_vec();
            pick.sort_unstable();
            if used.contains(&pick) && used.len() < binomial(num_parts, parts_per_class) {
                continue;
            }
            let mut m = vec![0.0; input_dim];
            for &p in &pick {
                for (a, b) in m.iter_mut().zip(&parts[p]) {
                    *a += b;
                }
            }
            used.push(pick);
            means.push(m);
        }
        Self::new(means, stdev, seed)
    }

    /// Means drawn i.i.d. from `N(0, separation²·I)`.
    pub fn random(num_classes: usize, input_dim: usize, separation: f64, stdev: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
        let means = (0..num_classes)
            .map(|_| {
                (0..input_dim)
                    .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Self::new(means, stdev, seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Draws `counts[c]` samples of class `c`, classes in order. Values are rounded
/// to `f32` precision so a corpus round-trip through disk is lossless.
pub fn synthesize_mixture(spec: &MixtureSpec, counts: &[usize]) -> Result<LongTailDataset> {
    synthesize_mixture_as(spec, counts, SampleShape::Vector { dim: spec.input_dim })
}

/// As [`synthesize_mixture`], tagging samples with an image layout.
pub fn synthesize_mixture_as(spec: &MixtureSpec, counts: &[usize], shape: SampleShape) -> Result<LongTailDataset> {
    if counts.len() != spec.num_classes {
        return Err(Error::invalid(format!(
            "{} counts for {} mixture classes",
            counts.len(),
            spec.num_classes
        )));
    }
    if shape.numel() != spec.input_dim {
        return Err(Error::invalid("sample shape does not match mixture dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(total * spec.input_dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            for &mu in &spec.means[c] {
                let z: f64 = rng.sample(StandardNormal);
                data.push((mu + spec.stdev * z) as f32 as f64);
            }
            labels.push(c);
        }
    }
    LongTailDataset::new(shape, data, labels, spec.num_classes, spec.seed)
}

/// Per-class uniform subsample without replacement. Output is grouped by
/// class with original order preserved inside each class.
pub fn subsample_corpus(corpus: &LongTailDataset, counts: &[usize], seed: u64) -> Result<LongTailDataset> {
    if counts.len() != corpus.num_classes() {
        return Err(Error::invalid(format!(
            "{} counts for a corpus with {} classes",
            counts.len(),
            corpus.num_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = corpus.shape.numel();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, mut idx) in corpus.class_indices().into_iter().enumerate() {
        if idx.len() < counts[c] {
            return Err(Error::invalid(format!(
                "class {c} has {} samples, {} requested",
                idx.len(),
                counts[c]
            )));
        }
        idx.shuffle(&mut rng);
        let mut keep = idx[..counts[c]].to_vec();
        keep.sort_unstable();
        for i in keep {
            data.extend_from_slice(&corpus.data[i * d..(i + 1) * d]);
            labels.push(c);
        }
    }
    LongTailDataset::new(corpus.shape, data, labels, corpus.num_classes(), seed)
}

/// Mirrors an image sample (`channels × height × width`) left to right.
pub fn hflip(sample: &[f64], channels: usize, height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; sample.len()];
    for c in 0..channels {
        for h in 0..height {
            let base = (c * height + h) * width;
            for w in 0..width {
                out[base + w] = sample[base + width - 1 - w];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longtail_data::{build_profile, realized_imbalance, ProfileKind};

    fn spec(seed: u64) -> MixtureSpec {
        MixtureSpec::new(vec![vec![1.0, -2.0], vec![0.0, 3.0]], 1.0, seed).unwrap()
    }

    #[test]
    fn count_bookkeeping() {
        let ds = synthesize_mixture(&spec(1), &[3, 1]).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels, [0, 0, 0, 1]);
        assert_eq!(ds.counts, [3, 1]);
    }

    #[test]
    fn same_seed_same_bits() {
        let a = synthesize_mixture(&spec(9), &[5, 5]).unwrap();
        let b = synthesize_mixture(&spec(9), &[5, 5]).unwrap();
        assert_eq!(a, b);
        let c = synthesize_mixture(&spec(10), &[5, 5]).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn empirical_mean_converges() {
        let ds = synthesize_mixture(&spec(3), &[10_000, 1]).unwrap();
        for k in 0..2 {
            let mean: f64 = (0..10_000).map(|i| ds.sample(i)[k]).sum::<f64>() / 10_000.0;
            assert!((mean - spec(3).means[0][k]).abs() < 0.05, "dim {k}: {mean}");
        }
    }

    #[test]
    fn rejects_duplicate_means_and_bad_counts() {
        assert!(MixtureSpec::new(vec![vec![1.0], vec![1.0]], 1.0, 0).is_err());
        assert!(MixtureSpec::new(vec![vec![1.0], vec![2.0]], 0.0, 0).is_err());
        assert!(synthesize_mixture(&spec(0), &[1]).is_err());
    }

    #[test]
    fn shared_parts_means_are_distinct() {
        let s = MixtureSpec::shared_parts(10, 16, 6, 2, 3.0, 1.0, 4).unwrap();
        assert_eq!(s.means.len(), 10);
    }

    #[test]
    fn subsample_full_counts_is_identity() {
        let corpus = synthesize_mixture(&spec(2), &[6, 6]).unwrap();
        let sub = subsample_corpus(&corpus, &[6, 6], 11).unwrap();
        assert_eq!(sub.data, corpus.data);
        assert_eq!(sub.labels, corpus.labels);
    }

    #[test]
    fn subsample_realizes_profile() {
        let corpus = synthesize_mixture(&spec(2), &[5000, 5000]).unwrap();
        let counts = build_profile(2, 5000, 100.0, ProfileKind::Exponential).unwrap();
        let sub = subsample_corpus(&corpus, &counts, 1).unwrap();
        assert_eq!(realized_imbalance(&sub.counts), 100.0);
    }

    #[test]
    fn subsample_seed_changes_selection_not_counts() {
        let corpus = synthesize_mixture(&spec(2), &[50, 50]).unwrap();
        let a = subsample_corpus(&corpus, &[10, 3], 1).unwrap();
        let b = subsample_corpus(&corpus, &[10, 3], 2).unwrap();
        assert_eq!(a.counts, b.counts);
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn subsample_rejects_insufficient() {
        let corpus = synthesize_mixture(&spec(2), &[5, 5]).unwrap();
        assert!(subsample_corpus(&corpus, &[6, 1], 0).is_err());
    }

    #[test]
    fn hflip_is_involution() {
        let img: Vec<f64> = (0..12).map(f64::from).collect();
        let f = hflip(&img, 1, 3, 4);
        assert_eq!(&f[..4], &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(hflip(&f, 1, 3, 4), img);
    }
}
