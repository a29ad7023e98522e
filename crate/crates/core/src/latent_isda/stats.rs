use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Count, mean and population covariance of a group of `D`-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: Vec<f64>,
    /// Row-major `D × D`.
    pub cov: Vec<f64>,
}

impl Moments {
    pub fn empty(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            cov: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Direct two-pass moments of a batch.
    pub fn from_observations<V: AsRef<[f64]>>(dim: usize, obs: &[V]) -> Result<Self> {
        let mut m = Self::empty(dim);
        if obs.is_empty() {
            return Ok(m);
        }
        if let Some(bad) = obs.iter().find(|o| o.as_ref().len() != dim) {
            return Err(Error::shape(
                "update_stats",
                format!("observation of length {} for dimension {dim}", bad.as_ref().len()),
            ));
        }
        let n = obs.len() as f64;
        for o in obs {
            for (a, b) in m.mean.iter_mut().zip(o.as_ref()) {
                *a += b;
            }
        }
        m.mean.iter_mut().for_each(|a| *a /= n);
        for o in obs {
            let o = o.as_ref();
            for r in 0..dim {
                let dr = o[r] - m.mean[r];
                for c in 0..dim {
                    m.cov[r * dim + c] += dr * (o[c] - m.mean[c]);
                }
            }
        }
        m.cov.iter_mut().for_each(|a| *a /= n);
        m.n = obs.len() as u64;
        Ok(m)
    }

    /// Exact merge of two groups' moments:
    ///
    /// `μ = (n·μ + n'·μ') / (n + n')`
    /// `Σ = (n·Σ + n'·Σ') / (n + n') + n·n'·ΔΔᵀ / (n + n')²`, `Δ = μ − μ'`.
    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let d = self.dim();
        let (n0, n1) = (self.n as f64, other.n as f64);
        let n = n0 + n1;
        let delta: Vec<f64> = self.mean.iter().zip(&other.mean).map(|(a, b)| a - b).collect();
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            *a = (n0 * *a + n1 * b) / n;
        }
        let cross = n0 * n1 / (n * n);
        for r in 0..d {
            for c in 0..d {
                let i = r * d + c;
                self.cov[i] = (n0 * self.cov[i] + n1 * other.cov[i]) / n + cross * delta[r] * delta[c];
            }
        }
        self.n += other.n;
    }

    pub fn cov_tensor(&self) -> Tensor {
        let d = self.dim();
        Tensor::new(vec![d, d], self.cov.clone()).expect("square covariance")
    }
}

/// Running moments for each of `M` latent categories (or classes).
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryStats {
    dim: usize,
    cats: Vec<Moments>,
}

impl CategoryStats {
    pub fn new(categories: usize, dim: usize) -> Self {
        Self {
            dim,
            cats: vec![Moments::empty(dim); categories],
        }
    }

    pub fn from_parts(dim: usize, cats: Vec<Moments>) -> Result<Self> {
        if cats.iter().any(|m| m.dim() != dim || m.cov.len() != dim * dim) {
            return Err(Error::shape("category_stats", "moment dimensions disagree"));
        }
        Ok(Self { dim, cats })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_categories(&self) -> usize {
        self.cats.len()
    }

    pub fn category(&self, m: usize) -> &Moments {
        &self.cats[m]
    }

    pub fn categories(&self) -> &[Moments] {
        &self.cats
    }

    pub fn counts(&self) -> Vec<u64> {
        self.cats.iter().map(|m| m.n).collect()
    }

    /// Folds a batch of new observations of category `m` into its moments.
    pub fn update<V: AsRef<[f64]>>(&mut self, m: usize, observations: &[V]) -> Result<()> {
        if m >= self.cats.len() {
            return Err(Error::invalid(format!("category {m} out of range")));
        }
        let batch = Moments::from_observations(self.dim, observations)?;
        self.cats[m].merge(&batch);
        Ok(())
    }

    /// Merges precomputed moments into category `m`.
    pub fn merge(&mut self, m: usize, moments: &Moments) -> Result<()> {
        if moments.dim() != self.dim || m >= self.cats.len() {
            return Err(Error::shape("update_stats", "moments do not fit these stats"));
        }
        self.cats[m].merge(moments);
        Ok(())
    }

    /// One observation per category: row `m` of `rows` goes to category `m`.
    pub fn observe_rows(&mut self, rows: &Tensor) -> Result<()> {
        if !rows.is_matrix() || rows.rows() != self.cats.len() || rows.cols() != self.dim {
            return Err(Error::shape(
                "update_stats",
                format!("rows {:?} for {} categories of dim {}", rows.shape(), self.cats.len(), self.dim),
            ));
        }
        for m in 0..self.cats.len() {
            self.update(m, &[rows.row(m)])?;
        }
        Ok(())
    }

    /// Covariances as tensors; categories with fewer than two observations
    /// contribute zero.
    pub fn covariances(&self) -> Vec<Tensor> {
        self.cats
            .iter()
            .map(|m| {
                if m.n < 2 {
                    Tensor::zeros(&[self.dim, self.dim])
                } else {
                    m.cov_tensor()
                }
            })
            .collect()
    }

    pub fn reset(&mut self) {
        self.cats.iter_mut().for_each(|m| *m = Moments::empty(self.dim));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn midpoint_merge() {
        let mut a = Moments::from_observations(1, &[[1.0], [1.0]]).unwrap();
        let b = Moments::from_observations(1, &[[3.0], [3.0]]).unwrap();
        a.merge(&b);
        assert_eq!(a.mean, [2.0]);
        assert_eq!(a.n, 4);
        assert_eq!(a.cov, [1.0]);
    }

    #[test]
    fn single_observation_into_empty() {
        let mut s = CategoryStats::new(2, 3);
        s.update(1, &[[1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(s.category(1).mean, [1.0, -2.0, 0.5]);
        assert!(s.category(1).cov.iter().all(|&v| v == 0.0));
        assert_eq!(s.category(0), &Moments::empty(3));
    }

    #[test]
    fn streaming_equals_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let obs: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let mut s = CategoryStats::new(1, 3);
        for o in &obs {
            s.update(0, &[o]).unwrap();
        }
        let batch = Moments::from_observations(3, &obs).unwrap();
        let got = s.category(0);
        assert_eq!(got.n, 100);
        for (a, b) in got.mean.iter().zip(&batch.mean).chain(got.cov.iter().zip(&batch.cov)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn categories_are_independent() {
        let mut s = CategoryStats::new(2, 2);
        s.update(0, &[[1.0, 1.0], [2.0, 0.0]]).unwrap();
        let before = s.category(0).clone();
        s.update(1, &[[9.0, 9.0], [-9.0, 3.0]]).unwrap();
        assert_eq!(s.category(0), &before);
    }

    #[test]
    fn rejects_wrong_dimension() {
        let mut s = CategoryStats::new(2, 2);
        assert!(s.update(0, &[[1.0, 2.0, 3.0]]).is_err());
        assert!(s.update(5, &[[1.0, 2.0]]).is_err());
        assert!(s.observe_rows(&Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn sparse_categories_give_zero_covariance() {
        let mut s = CategoryStats::new(1, 2);
        s.update(0, &[[1.0, 5.0]]).unwrap();
        assert!(s.covariances()[0].data().iter().all(|&v| v == 0.0));
    }
}
