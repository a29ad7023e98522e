//! Encoder → latent pool → decoder classifier and the combined objective.
//!
//! Inputs are batches of `B` flattened samples, one per row. The encoder maps
//! them to a `D × (B·P)` feature map (`P = H·W` grid positions per sample).
//! With the latent path enabled the decoder sees the features concatenated
//! with the `M` normalized similarity maps; otherwise it sees the features
//! alone. The decoder is global average pooling followed by a linear map to
//! class logits.

mod checkpoint;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::diffcore::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::latent_isda::latent_labels;
use crate::latent_pool::{self, LatentPool, PoolVars};
use crate::longtail_data::SampleShape;
use crate::tensor::Tensor;

/// Encoder architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input: SampleShape,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Spatial grid `(H, W)` of the feature map.
    pub grid: (usize, usize),
}

impl EncoderConfig {
    pub fn positions(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::invalid("feature dimension must be at least 2"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::invalid("grid extents must be positive"));
        }
        match self.input {
            SampleShape::Vector { dim: 0 } => Err(Error::invalid("input dimension must be positive")),
            SampleShape::Image {
                channels,
                height,
                width,
            } if channels == 0 || height % self.grid.0 != 0 || width % self.grid.1 != 0 => Err(Error::invalid(format!(
                "image {channels}x{height}x{width} does not tile into a {}x{} grid",
                self.grid.0, self.grid.1
            ))),
            _ => Ok(()),
        }
    }

    /// Width of the encoder's first layer input.
    fn layer_input(&self) -> usize {
        match self.input {
            SampleShape::Vector { dim } => dim,
            SampleShape::Image { channels, height, width } => channels * (height / self.grid.0) * (width / self.grid.1),
        }
    }

    /// Width of the encoder's last layer output.
    fn layer_output(&self) -> usize {
        match self.input {
            SampleShape::Vector { .. } => self.feature_dim * self.positions(),
            SampleShape::Image { .. } => self.feature_dim,
        }
    }
}

/// Complete architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    /// Size of the latent pool; `None` disables the latent path.
    pub num_latents: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.num_latents == Some(0) {
            return Err(Error::invalid("latent pool must hold at least one latent"));
        }
        Ok(())
    }

    /// Channels seen by the decoder.
    pub fn fused_channels(&self) -> usize {
        self.encoder.feature_dim + self.num_latents.unwrap_or(0)
    }
}

/// Weight (`out × in`) and bias (`out`) of one affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    LatentPool,
    LatentClassifier,
    Decoder,
}

/// Parameters of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Vec<Linear>,
    pub decoder: Linear,
    pub pool: Option<LatentPool>,
    /// Classifier of the latent pool over its `M` pseudo-classes.
    pub latent_classifier: Option<Linear>,
}

fn add_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    out: usize,
    inp: usize,
    std: f64,
    rng: &mut R,
) -> Linear {
    Linear {
        w: store.add(format!("{name}.weight"), Tensor::randn(&[out, inp], std, rng), true),
        b: store.add(format!("{name}.bias"), Tensor::zeros(&[out]), true),
    }
}

/// Layer widths of the encoder, input first.
pub fn encoder_widths(config: &EncoderConfig) -> Vec<usize> {
    let mut widths = vec![config.layer_input()];
    widths.extend(&config.hidden);
    widths.push(config.layer_output());
    widths
}

impl ModelParams {
    /// Draws initial parameters in a fixed order: encoder layers, decoder,
    /// latent pool, latent classifier. Layers feeding a ReLU use
    /// `N(0, 2/fan_in)`, others `N(0, 1/fan_in)`; biases start at zero.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let widths = encoder_widths(&config.encoder);
        let last = widths.len() - 2;
        let encoder = (0..widths.len() - 1)
            .map(|i| {
                let gain = if i < last { 2.0 } else { 1.0 };
                let std = (gain / widths[i] as f64).sqrt();
                add_linear(&mut store, &format!("encoder.{i}"), widths[i + 1], widths[i], std, rng)
            })
            .collect();
        let fused = config.fused_channels();
        let decoder = add_linear(&mut store, "decoder", config.num_classes, fused, (1.0 / fused as f64).sqrt(), rng);
        let d = config.encoder.feature_dim;
        let (pool, latent_classifier) = match config.num_latents {
            Some(m) => {
                let pool = LatentPool::init(&mut store, m, d, rng)?;
                let cls = add_linear(&mut store, "latent_classifier", m, d, (1.0 / d as f64).sqrt(), rng);
                (Some(pool), Some(cls))
            }
            None => (None, None),
        };
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            pool,
            latent_classifier,
        })
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        let has = |l: &Linear| l.w == id || l.b == id;
        if self.encoder.iter().any(has) {
            ParamGroup::Encoder
        } else if has(&self.decoder) {
            ParamGroup::Decoder
        } else if self.latent_classifier.as_ref().is_some_and(has) {
            ParamGroup::LatentClassifier
        } else {
            ParamGroup::LatentPool
        }
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.store.iter().map(|p| p.id).filter(|&id| self.group_of(id) == group).collect()
    }

    /// Records every parameter on `tape`, frozen where `frozen(group)` holds.
    pub fn bind(&self, tape: &mut Tape, frozen: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self
            .store
            .iter()
            .map(|p| {
                if frozen(self.group_of(p.id)) {
                    tape.frozen(&self.store, p.id)
                } else {
                    tape.param(&self.store, p.id)
                }
            })
            .collect();
        Bound(vars)
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let numel = self.config.encoder.input.numel();
        if !input.is_matrix() || input.cols() != numel {
            return Err(Error::shape(
                "encode",
                format!("batch {:?} for samples of {numel} values", input.shape()),
            ));
        }
        Ok(input.rows())
    }

    /// Feature map `D × (B·P)` of a `B × numel` batch.
    pub fn encode_var(&self, tape: &mut Tape, bound: &Bound, input: &Tensor) -> Result<Var> {
        let batch = self.check_input(input)?;
        let enc = &self.config.encoder;
        let x = match enc.input {
            SampleShape::Vector { .. } => input.transpose(),
            SampleShape::Image { channels, height, width } => patchify(input, batch, channels, height, width, enc.grid),
        };
        let mut h = tape.constant(x);
        for (i, layer) in self.encoder.iter().enumerate() {
            h = tape.linear_1x1(h, bound.get(layer.w), bound.get(layer.b))?;
            if i + 1 < self.encoder.len() {
                h = tape.relu(h);
            }
        }
        match enc.input {
            SampleShape::Vector { .. } => tape.split_channels(h, enc.positions()),
            SampleShape::Image { .. } => Ok(h),
        }
    }

    /// Feature maps as a `B × D × HW` tensor.
    pub fn encode(&self, input: &Tensor) -> Result<Tensor> {
        let batch = self.check_input(input)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| true);
        let f = self.encode_var(&mut tape, &bound, input)?;
        let (d, p) = (self.config.encoder.feature_dim, self.config.encoder.positions());
        let v = tape.value(f);
        let mut out = Vec::with_capacity(batch * d * p);
        for s in 0..batch {
            for ch in 0..d {
                out.extend_from_slice(&v.row(ch)[s * p..(s + 1) * p]);
            }
        }
        Tensor::new(vec![batch, d, p], out)
    }

    fn pool_vars(&self, bound: &Bound) -> Option<PoolVars> {
        self.pool.map(|p| PoolVars {
            features: bound.get(p.features),
            fc_w: bound.get(p.fc_w),
            fc_b: bound.get(p.fc_b),
        })
    }

    /// Full forward pass. With `stop_cls_grad_at_pool` the maps feeding the
    /// decoder are computed from detached latent encodings, so the
    /// classification loss does not reach the pool.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: &Tensor, stop_cls_grad_at_pool: bool) -> Result<ForwardOutput> {
        let batch = self.check_input(input)?;
        let positions = self.config.encoder.positions();
        let features = self.encode_var(tape, bound, input)?;
        let mut latent = None;
        let decoder_input = match self.pool_vars(bound) {
            Some(pv) => {
                let encoded = latent_pool::encode_latents(tape, pv)?;
                let (raw, sims) = latent_pool::similarity_vars(tape, encoded, features)?;
                let cls_sims = if stop_cls_grad_at_pool {
                    let detached = tape.detach(encoded);
                    latent_pool::similarity_vars(tape, detached, features)?.1
                } else {
                    sims
                };
                latent = Some(LatentVars {
                    encoded,
                    raw_sims: raw,
                    sims,
                });
                latent_pool::fuse_var(tape, features, cls_sims)?
            }
            None => features,
        };
        let pooled = tape.block_mean_cols(decoder_input, positions)?;
        let logits_t = tape.linear_1x1(pooled, bound.get(self.decoder.w), bound.get(self.decoder.b))?;
        let logits = tape.transpose(logits_t)?;
        Ok(ForwardOutput {
            batch,
            positions,
            features,
            latent,
            pooled,
            logits,
        })
    }

    /// `B × C` logits.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| true);
        let out = self.forward(&mut tape, &bound, input, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Records the combined objective `α·aug + β·recon + γ·cls`.
    pub fn objective(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &Tensor,
        labels: &[usize],
        obj: &Objective,
    ) -> Result<(LossVars, ForwardOutput)> {
        obj.weights.validate()?;
        let out = self.forward(tape, bound, input, obj.stop_cls_grad_at_pool)?;
        if labels.len() != out.batch {
            return Err(Error::shape("objective", format!("{} labels for {} samples", labels.len(), out.batch)));
        }
        let cls = match &obj.class_covs {
            Some(covs) => {
                let x = tape.transpose(out.pooled)?;
                let (w, b) = (bound.get(self.decoder.w), bound.get(self.decoder.b));
                tape.augmented_cross_entropy(x, w, b, labels, covs.clone(), obj.lambda)?
            }
            None if obj.smoothing > 0.0 => tape.cross_entropy_smoothed(out.logits, labels, obj.smoothing)?,
            None => tape.cross_entropy(out.logits, labels)?,
        };
        let mut recon = None;
        let mut aug = None;
        if let (Some(lv), Some(pv)) = (&out.latent, self.pool_vars(bound)) {
            if obj.recon {
                let f_hat = latent_pool::reconstruct_var(tape, lv.encoded, lv.sims)?;
                let corr = latent_pool::correlation_var(tape, f_hat, out.features, out.positions)?;
                recon = Some(latent_pool::reconstruction_loss_var(tape, corr)?);
            }
            if obj.aug {
                let covs = obj
                    .latent_covs
                    .clone()
                    .ok_or_else(|| Error::invalid("latent augmentation needs latent covariances"))?;
                let cls = self.latent_classifier.expect("latent classifier exists with the pool");
                let m = self.pool.map_or(0, |p| p.num_latents);
                aug = Some(tape.augmented_cross_entropy(
                    pv.features,
                    bound.get(cls.w),
                    bound.get(cls.b),
                    &latent_labels(m),
                    covs,
                    obj.lambda,
                )?);
            }
        }
        let w = obj.weights;
        let mut terms = Vec::with_capacity(3);
        if let Some(a) = aug {
            terms.push((a, w.alpha));
        }
        if let Some(r) = recon {
            terms.push((r, w.beta));
        }
        terms.push((cls, w.gamma));
        let total = tape.weighted_sum(&terms)?;
        Ok((LossVars { total, cls, recon, aug }, out))
    }

    /// Value of the combined objective.
    pub fn total_loss(&self, input: &Tensor, labels: &[usize], obj: &Objective) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| true);
        let (vars, _) = self.objective(&mut tape, &bound, input, labels, obj)?;
        Ok(vars.breakdown(&tape, obj.weights))
    }
}

/// Splits each image into a grid of non-overlapping patches, giving a
/// `patch_len × (B·P)` matrix with sample-major columns.
fn patchify(input: &Tensor, batch: usize, channels: usize, height: usize, width: usize, grid: (usize, usize)) -> Tensor {
    let (ph, pw) = (height / grid.0, width / grid.1);
    let patch_len = channels * ph * pw;
    let positions = grid.0 * grid.1;
    let cols = batch * positions;
    let mut out = vec![0.0; patch_len * cols];
    for s in 0..batch {
        let img = input.row(s);
        for gy in 0..grid.0 {
            for gx in 0..grid.1 {
                let col = s * positions + gy * grid.1 + gx;
                for c in 0..channels {
                    for y in 0..ph {
                        for x in 0..pw {
                            let r = (c * ph + y) * pw + x;
                            out[r * cols + col] = img[(c * height + gy * ph + y) * width + gx * pw + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![patch_len, cols], out).expect("patch layout")
}

/// Tape handles for every parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(pub Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Latent-path intermediates.
#[derive(Debug, Clone, Copy)]
pub struct LatentVars {
    /// `D × M` encoded latents.
    pub encoded: Var,
    /// `M × (B·P)` post-sigmoid maps.
    pub raw_sims: Var,
    /// `M × (B·P)` normalized maps.
    pub sims: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub batch: usize,
    pub positions: usize,
    /// `D × (B·P)`.
    pub features: Var,
    pub latent: Option<LatentVars>,
    /// `fused_channels × B` pooled decoder input.
    pub pooled: Var,
    /// `B × C`.
    pub logits: Var,
}

/// Non-negative loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("loss weights must be finite and non-negative"))
        }
    }
}

/// Which terms enter the objective and with what inputs.
#[derive(Debug, Clone, Default)]
pub struct Objective {
    pub weights: LossWeights,
    pub recon: bool,
    pub aug: bool,
    pub lambda: f64,
    /// Per-latent covariances, required when `aug` is set.
    pub latent_covs: Option<Arc<Vec<Tensor>>>,
    /// Per-class covariances of pooled features. When present the
    /// classification term becomes the augmented bound on the decoder.
    pub class_covs: Option<Arc<Vec<Tensor>>>,
    pub smoothing: f64,
    pub stop_cls_grad_at_pool: bool,
}

impl Objective {
    /// Plain cross-entropy with weight `gamma = 1`.
    pub fn plain() -> Self {
        Self {
            weights: LossWeights {
                alpha: 0.0,
                beta: 0.0,
                gamma: 1.0,
            },
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cls: Var,
    pub recon: Option<Var>,
    pub aug: Option<Var>,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, weights: LossWeights) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossBreakdown {
            total: tape.value(self.total).item(),
            cls: tape.value(self.cls).item(),
            recon: val(self.recon),
            latent_aug: val(self.aug),
            alpha: weights.alpha,
            beta: weights.beta,
            gamma: weights.gamma,
        }
    }
}

/// Values of the objective and its terms. Disabled terms read zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub recon: f64,
    pub latent_aug: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.cls, self.recon, self.latent_aug].iter().all(|v| v.is_finite())
    }
}
