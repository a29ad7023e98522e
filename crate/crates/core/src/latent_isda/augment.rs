use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::stats::CategoryStats;
use crate::diffcore::kernels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Eigenvalues above `-PSD_TOLERANCE` are clamped to zero before factoring.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Linear ramp of augmentation strength, `λ(t) = (t/T)·λ₀` clamped to
/// `[0, λ₀]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugSchedule {
    pub lambda0: f64,
    pub total_iters: usize,
}

impl AugSchedule {
    pub fn new(lambda0: f64, total_iters: usize) -> Result<Self> {
        if !(lambda0 >= 0.0 && lambda0.is_finite()) || total_iters == 0 {
            return Err(Error::invalid("schedule needs lambda0 >= 0 and total_iters > 0"));
        }
        Ok(Self { lambda0, total_iters })
    }

    pub fn lambda_at(&self, t: usize) -> f64 {
        let frac = (t as f64 / self.total_iters as f64).clamp(0.0, 1.0);
        frac * self.lambda0
    }
}

/// Pseudo ground truth of the latent categories: category `m` is class `m`.
pub fn latent_labels(num_latents: usize) -> Vec<usize> {
    (0..num_latents).collect()
}

/// Closed-form augmented loss over the latent pool: each latent `f'_m` is
/// classified as pseudo-class `m` by `(w, b)` under perturbations drawn from
/// `N(0, λ·Σ_m)`, and the bound is averaged over `m`.
pub fn isda_upper_bound_loss(latents: &Tensor, w: &Tensor, b: &Tensor, stats: &CategoryStats, lambda: f64) -> Result<f64> {
    if stats.num_categories() != latents.rows() {
        return Err(Error::shape(
            "isda_upper_bound_loss",
            format!("{} categories in stats for {} latents", stats.num_categories(), latents.rows()),
        ));
    }
    let labels = latent_labels(latents.rows());
    let (loss, _) = kernels::augmented_ce_forward(latents, w, b, &labels, &stats.covariances(), lambda)?;
    Ok(loss)
}

/// Bound for a single feature `x` with label `label`: `log Σ_j exp(z_j)`.
pub fn isda_bound_single(x: &[f64], w: &Tensor, b: &Tensor, label: usize, cov: &Tensor, lambda: f64) -> f64 {
    let z = kernels::augmented_logits(x, w, b.data(), label, cov, lambda);
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Symmetric square root factor `F` with `F·Fᵀ = Σ` (after PSD repair).
pub fn psd_factor(cov: &Tensor) -> Result<Tensor> {
    if !cov.is_matrix() || cov.rows() != cov.cols() {
        return Err(Error::shape("psd_factor", format!("{:?} is not square", cov.shape())));
    }
    let d = cov.rows();
    let sym = DMatrix::from_fn(d, d, |r, c| 0.5 * (cov.at(r, c) + cov.at(c, r)));
    let eig = SymmetricEigen::new(sym);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&e| e < -PSD_TOLERANCE) {
        return Err(Error::invalid(format!("covariance is not PSD (eigenvalue {bad:e})")));
    }
    let sqrt = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let f = v * DMatrix::from_diagonal(&sqrt) * v.transpose();
    Tensor::new(vec![d, d], (0..d * d).map(|i| f[(i / d, i % d)]).collect())
}

/// Draws `count` samples from `N(mean, λ·Σ)`.
pub fn sample_augmented<R: Rng + ?Sized>(
    mean: &[f64],
    cov: &Tensor,
    lambda: f64,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let d = mean.len();
    if cov.shape() != [d, d] {
        return Err(Error::shape("sample_augmented", "covariance does not match mean"));
    }
    if count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let factor = psd_factor(cov)?;
    if lambda == 0.0 {
        return Ok(vec![mean.to_vec(); count]);
    }
    let s = lambda.sqrt();
    Ok((0..count)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            (0..d)
                .map(|r| mean[r] + s * factor.row(r).iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        })
        .collect())
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Cross-entropy of the linear classifier `(w, b)` at `x`.
pub fn linear_ce(x: &[f64], w: &Tensor, b: &Tensor, label: usize) -> f64 {
    let logits: Vec<f64> = (0..w.rows())
        .map(|j| w.row(j).iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b.data()[j])
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - logits[label]
}

/// Average cross-entropy of `(w, b)` over draws of `N(mean, λ·Σ)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_expected_ce<R: Rng + ?Sized>(
    mean: &[f64],
    cov: &Tensor,
    lambda: f64,
    w: &Tensor,
    b: &Tensor,
    label: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if label >= w.rows() || w.cols() != mean.len() || b.numel() != w.rows() {
        return Err(Error::shape("mc_expected_ce", "classifier does not match feature"));
    }
    let draws = sample_augmented(mean, cov, lambda, n_samples, rng)?;
    let vals: Vec<f64> = draws.iter().map(|x| linear_ce(x, w, b, label)).collect();
    // Welford: identical draws give their value back exactly.
    let (mut mu, mut m2) = (0.0, 0.0);
    for (k, &v) in vals.iter().enumerate() {
        let delta = v - mu;
        mu += delta / (k + 1) as f64;
        m2 += delta * (v - mu);
    }
    let n = vals.len() as f64;
    let var = if vals.len() > 1 { m2 / (n - 1.0) } else { 0.0 };
    Ok(McEstimate {
        mean: mu,
        stderr: (var / n).sqrt(),
        samples: vals.len(),
    })
}
