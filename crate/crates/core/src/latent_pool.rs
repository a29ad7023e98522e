//! Shared pool of class-agnostic latent category features.
//!
//! Each latent `f'_m` is encoded by a square 1×1 map `FC`, compared with every
//! spatial position of an image feature map through a sigmoid of the inner
//! product, and the resulting maps are softmax-normalized across the pool.
//! The normalized maps weight the encoded latents to reconstruct the feature
//! map, and a cross-entropy over rows of the reconstructed-vs-original
//! correlation matrix (target: the diagonal) ties the pool to the features.
//!
//! Features use a channels × positions layout, `D × (B·P)` for a batch of `B`
//! maps with `P = H·W` positions each, sample-major along the columns.

use rand::Rng;

use crate::diffcore::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handles of the pool's parameters inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentPool {
    /// `M × D` latent category embeddings.
    pub features: ParamId,
    /// `D × D` weight of the encoding map.
    pub fc_w: ParamId,
    /// `D` bias of the encoding map.
    pub fc_b: ParamId,
    pub num_latents: usize,
    pub dim: usize,
}

impl LatentPool {
    /// Latents ~ N(0, 1/D); encoding map = identity + N(0, 0.01²), zero bias.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, num_latents: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if num_latents == 0 || dim < 2 {
            return Err(Error::invalid(format!(
                "latent pool needs M >= 1 and D >= 2 (got M={num_latents}, D={dim})"
            )));
        }
        let features = Tensor::randn(&[num_latents, dim], 1.0 / (dim as f64).sqrt(), rng);
        let mut w = Tensor::randn(&[dim, dim], 0.01, rng);
        for i in 0..dim {
            w.data_mut()[i * dim + i] += 1.0;
        }
        Ok(Self {
            features: store.add("pool.features", features, false),
            fc_w: store.add("pool.fc.weight", w, false),
            fc_b: store.add("pool.fc.bias", Tensor::zeros(&[dim]), false),
            num_latents,
            dim,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.features, self.fc_w, self.fc_b]
    }
}

/// Tape handles of the pool parameters.
#[derive(Debug, Clone, Copy)]
pub struct PoolVars {
    pub features: Var,
    pub fc_w: Var,
    pub fc_b: Var,
}

/// Encoded latents `FC(f')` as a `D × M` matrix (one column per latent).
pub fn encode_latents(tape: &mut Tape, pool: PoolVars) -> Result<Var> {
    let cols = tape.transpose(pool.features)?;
    tape.linear_1x1(cols, pool.fc_w, pool.fc_b)
}

/// Raw (`sigmoid`) and normalized (softmax over the pool) similarity maps,
/// both `M × N` for features `D × N`.
pub fn similarity_vars(tape: &mut Tape, encoded: Var, features: Var) -> Result<(Var, Var)> {
    let (d, _) = (tape.value(encoded).rows(), tape.value(encoded).cols());
    if tape.value(features).rows() != d {
        return Err(Error::shape(
            "similarity_maps",
            format!("features have {} channels, pool has {d}", tape.value(features).rows()),
        ));
    }
    let et = tape.transpose(encoded)?;
    let scores = tape.matmul(et, features)?;
    let raw = tape.sigmoid(scores);
    let normalized = tape.softmax(raw, 0)?;
    Ok((raw, normalized))
}

/// `f̂ = Σ_m FC(f'_m)·Ŝ^m`, a `D × N` matrix.
pub fn reconstruct_var(tape: &mut Tape, encoded: Var, normalized: Var) -> Result<Var> {
    tape.matmul(encoded, normalized)
}

/// Per-sample correlation blocks `f̂ᵀ f`, stacked to `(B·P) × P`.
pub fn correlation_var(tape: &mut Tape, f_hat: Var, features: Var, positions: usize) -> Result<Var> {
    tape.block_gram(f_hat, features, positions)
}

/// Row `j` of each correlation block is a logit vector whose target is `j`;
/// the mean over all rows of all samples.
pub fn reconstruction_loss_var(tape: &mut Tape, corr: Var) -> Result<Var> {
    let (rows, positions) = (tape.value(corr).rows(), tape.value(corr).cols());
    let targets: Vec<usize> = (0..rows).map(|r| r % positions).collect();
    tape.cross_entropy(corr, &targets)
}

/// Channel concatenation of the features and the normalized maps.
pub fn fuse_var(tape: &mut Tape, features: Var, normalized: Var) -> Result<Var> {
    tape.concat_rows(&[features, normalized])
}

/// Similarity maps of one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStack {
    /// `M × H × W`, post-sigmoid.
    pub raw: Tensor,
    /// `M × H × W`, softmax over the first axis.
    pub normalized: Tensor,
}

/// Reconstruction of one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `D × HW`.
    pub f_hat: Tensor,
    /// `HW × HW`, `f̂ᵀ f`.
    pub corr: Tensor,
}

fn bind_frozen(tape: &mut Tape, store: &ParamStore, pool: &LatentPool) -> PoolVars {
    PoolVars {
        features: tape.frozen(store, pool.features),
        fc_w: tape.frozen(store, pool.fc_w),
        fc_b: tape.frozen(store, pool.fc_b),
    }
}

fn check_grid(f: &Tensor, grid: (usize, usize), dim: usize) -> Result<()> {
    if !f.is_matrix() || f.rows() != dim || f.cols() != grid.0 * grid.1 {
        return Err(Error::shape(
            "similarity_maps",
            format!("features {:?} for D={dim}, grid {}x{}", f.shape(), grid.0, grid.1),
        ));
    }
    Ok(())
}

/// Similarity maps between the pool and a `D × HW` feature map.
pub fn similarity_maps(store: &ParamStore, pool: &LatentPool, f: &Tensor, grid: (usize, usize)) -> Result<SimilarityStack> {
    check_grid(f, grid, pool.dim)?;
    let mut tape = Tape::new();
    let vars = bind_frozen(&mut tape, store, pool);
    let enc = encode_latents(&mut tape, vars)?;
    let fv = tape.constant(f.clone());
    let (raw, norm) = similarity_vars(&mut tape, enc, fv)?;
    let shape = vec![pool.num_latents, grid.0, grid.1];
    Ok(SimilarityStack {
        raw: tape.value(raw).reshape(shape.clone())?,
        normalized: tape.value(norm).reshape(shape)?,
    })
}

/// Reconstructs `f` from the pool weighted by `sims.normalized`.
pub fn reconstruct(store: &ParamStore, pool: &LatentPool, f: &Tensor, sims: &SimilarityStack) -> Result<Reconstruction> {
    let m = pool.num_latents;
    let hw = sims.normalized.numel() / m;
    check_grid(f, (hw, 1), pool.dim)?;
    let mut tape = Tape::new();
    let vars = bind_frozen(&mut tape, store, pool);
    let enc = encode_latents(&mut tape, vars)?;
    let norm = tape.constant(sims.normalized.reshape(vec![m, hw])?);
    let f_hat = reconstruct_var(&mut tape, enc, norm)?;
    let fv = tape.constant(f.clone());
    let corr = correlation_var(&mut tape, f_hat, fv, hw)?;
    Ok(Reconstruction {
        f_hat: tape.value(f_hat).clone(),
        corr: tape.value(corr).clone(),
    })
}

/// Mean over rows `j` of `-log softmax(C_f[j, :])[j]`.
pub fn reconstruction_loss(recon: &Reconstruction) -> Result<f64> {
    let c = &recon.corr;
    if !c.is_matrix() || c.rows() != c.cols() {
        return Err(Error::shape("reconstruction_loss", format!("{:?} is not square", c.shape())));
    }
    let mut tape = Tape::new();
    let v = tape.constant(c.clone());
    let l = reconstruction_loss_var(&mut tape, v)?;
    Ok(tape.value(l).item())
}

/// `(D + M) × HW` decoder input.
pub fn fuse_for_decoder(f: &Tensor, sims: &SimilarityStack) -> Result<Tensor> {
    let m = sims.normalized.shape()[0];
    let hw = sims.normalized.numel() / m;
    if !f.is_matrix() || f.cols() != hw {
        return Err(Error::shape(
            "fuse_for_decoder",
            format!("features {:?} vs {hw} map positions", f.shape()),
        ));
    }
    let mut data = f.data().to_vec();
    data.extend_from_slice(sims.normalized.data());
    Tensor::new(vec![f.rows() + m, hw], data)
}
