//! Two-stage decoupled training, evaluation and the ablation harness.
//!
//! Stage 1 learns the representation on instance-balanced batches with the
//! combined objective. Stage 2 freezes the encoder and the latent pool and
//! retrains the decoder on class-balanced batches.

mod ablation;
mod metrics;
mod plain;
mod record;

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{
    component_grid, render_table, run_ablation, summarize, weight_grid, AblationCell, AblationRow, MeanStd, SummaryRow,
};
pub use metrics::{argmax, evaluate, gather, latent_usage, predict_all, Metrics};
pub use plain::{train_plain, PlainClassifier};
pub use record::{config_hash, unix_timestamp, EvalPoint, LossPoint, RunRecord, RUN_FORMAT};

use crate::diffcore::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::latent_isda::{AugSchedule, CategoryStats};
use crate::longtail_data::{hflip, split_classes, BatchSampler, LongTailDataset, SampleShape, SamplingMode};
use crate::model::{Checkpoint, EncoderConfig, LossWeights, ModelConfig, ModelParams, Objective, ParamGroup};
use crate::tensor::Tensor;

/// Uniform label smoothing used in stage 2 when enabled.
pub const STAGE2_SMOOTHING: f64 = 0.1;

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Iterations at which the stage-1 learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_points: Vec<usize>,
    pub lr_decay_factor: f64,
    pub stage2_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda0: f64,
    pub num_latents: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub latent_on: bool,
    pub recon_on: bool,
    pub aug_on: bool,
    pub raw_isda_baseline: bool,
    pub stage2_smoothing: bool,
    pub stop_cls_grad_at_pool: bool,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Random horizontal flips of image inputs during stage 1.
    pub hflip: bool,
    pub log_every: usize,
    /// Validation interval in iterations; 0 evaluates only at stage ends.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 3000,
            stage2_iters: 500,
            batch_size: 64,
            lr: 0.05,
            lr_decay_points: vec![2000, 2600],
            lr_decay_factor: 0.1,
            stage2_lr: 0.005,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda0: 0.5,
            num_latents: 16,
            alpha: 0.1,
            beta: 0.1,
            gamma: 1.0,
            seed: 0,
            latent_on: true,
            recon_on: true,
            aug_on: true,
            raw_isda_baseline: false,
            stage2_smoothing: false,
            stop_cls_grad_at_pool: false,
            hidden: vec![64],
            feature_dim: 8,
            grid_h: 4,
            grid_w: 4,
            hflip: false,
            log_every: 100,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Plain encoder + classifier: every latent component off.
    pub fn baseline() -> Self {
        Self {
            latent_on: false,
            recon_on: false,
            aug_on: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.stage2_lr > 0.0 && self.stage2_lr.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_decay_factor > 0.0) || !(self.lambda0 >= 0.0) {
            return bad("weight_decay and lambda0 must be non-negative, lr_decay_factor positive");
        }
        self.weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.latent_on && self.num_latents == 0 {
            return bad("num_latents must be positive when latent_on is set");
        }
        if self.latent_on && self.raw_isda_baseline {
            return bad("raw_isda_baseline augments pooled features of the plain model; disable latent_on");
        }
        if self.feature_dim < 2 || self.grid_h == 0 || self.grid_w == 0 || self.hidden.contains(&0) {
            return bad("feature_dim must be at least 2, grid and hidden widths positive");
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn model_config(&self, input: SampleShape, num_classes: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input,
                hidden: self.hidden.clone(),
                feature_dim: self.feature_dim,
                grid: (self.grid_h, self.grid_w),
            },
            num_classes,
            num_latents: self.latent_on.then_some(self.num_latents),
        }
    }

    /// Stage-1 learning rate at iteration `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let decays = self.lr_decay_points.iter().filter(|&&p| t >= p).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    /// Short name of the component combination.
    pub fn variant_label(&self) -> String {
        if self.raw_isda_baseline {
            return "raw-isda".into();
        }
        match (self.latent_on, self.aug_on, self.recon_on) {
            (false, ..) => "baseline".into(),
            (true, false, false) => "+latent".into(),
            (true, true, false) => "+latent+aug".into(),
            (true, false, true) => "+latent+recon".into(),
            (true, true, true) => "full".into(),
        }
    }
}

/// SGD with momentum and decoupled per-parameter weight decay flags:
/// `v ← μ·v + g + wd·θ` (decay only where flagged), `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Updates the parameters for which `trainable` holds.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, trainable: impl Fn(usize) -> bool) {
        for (k, (p, v)) in store.iter_mut().zip(&mut self.velocity).enumerate() {
            if !trainable(k) {
                continue;
            }
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            for ((vi, &g), theta) in v.data_mut().iter_mut().zip(p.grad.data()).zip(p.value.data_mut()) {
                *vi = self.momentum * *vi + g + wd * *theta;
                *theta -= lr * *vi;
            }
        }
    }
}

/// Result of the representation-learning stage.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub model: ModelParams,
    pub latent_stats: Option<CategoryStats>,
    pub class_stats: Option<CategoryStats>,
    pub trace: Vec<LossPoint>,
    pub evals: Vec<EvalPoint>,
}

/// Result of the classifier-retraining stage.
#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub model: ModelParams,
    pub trace: Vec<LossPoint>,
    pub evals: Vec<EvalPoint>,
}

fn batch_input(ds: &LongTailDataset, idx: &[usize], flip: bool, rng: &mut ChaCha8Rng) -> Tensor {
    let mut x = gather(ds, idx);
    if let (true, SampleShape::Image { channels, height, width }) = (flip, ds.shape) {
        let numel = ds.shape.numel();
        for (r, &i) in idx.iter().enumerate() {
            if rng.random::<bool>() {
                let flipped = hflip(ds.sample(i), channels, height, width);
                x.data_mut()[r * numel..(r + 1) * numel].copy_from_slice(&flipped);
            }
        }
    }
    x
}

fn monitor_point(
    model: &ModelParams,
    monitor: Option<(&LongTailDataset, &crate::longtail_data::ClassSplit)>,
    stage: u8,
    iteration: usize,
) -> Result<Option<EvalPoint>> {
    let Some((ds, split)) = monitor else {
        return Ok(None);
    };
    Ok(Some(EvalPoint {
        stage,
        iteration,
        metrics: evaluate(model, ds, split)?,
    }))
}

/// Optimizes the combined objective on instance-balanced batches. The
/// latent statistics receive one observation per latent per iteration: the
/// latent vector after that iteration's update.
pub fn train_stage1(
    config: &TrainConfig,
    train: &LongTailDataset,
    rng: &mut ChaCha8Rng,
    monitor: Option<&LongTailDataset>,
) -> Result<Stage1Output> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut model = ModelParams::init(config.model_config(train.shape, train.num_classes()), rng)?;
    let mut sampler = BatchSampler::new(train, SamplingMode::InstanceBalanced, rng.random())?;
    let split = split_classes(&train.counts);
    let monitor = monitor.map(|m| (m, &split));
    let schedule = AugSchedule::new(config.lambda0, config.stage1_iters.max(1))?;
    let d = config.feature_dim;
    let mut latent_stats = model.pool.map(|p| CategoryStats::new(p.num_latents, d));
    let mut class_stats = config
        .raw_isda_baseline
        .then(|| CategoryStats::new(train.num_classes(), model.config.fused_channels()));
    let mut opt = Sgd::new(&model.store, config.momentum, config.weight_decay);
    let mut trace = Vec::new();
    let mut evals = Vec::new();
    let latent = config.latent_on;

    for t in 0..config.stage1_iters {
        let idx = sampler.next_batch(config.batch_size)?;
        let input = batch_input(train, &idx, config.hflip, rng);
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let lambda = schedule.lambda_at(t);
        let lr = config.lr_at(t);
        let obj = Objective {
            weights: config.weights(),
            recon: latent && config.recon_on,
            aug: latent && config.aug_on,
            lambda,
            latent_covs: (latent && config.aug_on)
                .then(|| Arc::new(latent_stats.as_ref().expect("pool stats").covariances())),
            class_covs: class_stats.as_ref().map(|s| Arc::new(s.covariances())),
            smoothing: 0.0,
            stop_cls_grad_at_pool: config.stop_cls_grad_at_pool,
        };
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |_| false);
        let (vars, out) = model.objective(&mut tape, &bound, &input, &labels, &obj)?;
        let breakdown = vars.breakdown(&tape, obj.weights);
        if !breakdown.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                detail: format!("stage 1 loss {breakdown:?} at lr {lr}, lambda {lambda}"),
            });
        }
        if let Some(stats) = class_stats.as_mut() {
            let pooled = tape.value(out.pooled);
            for (s, &y) in labels.iter().enumerate() {
                let column: Vec<f64> = (0..pooled.rows()).map(|r| pooled.at(r, s)).collect();
                stats.update(y, &[column])?;
            }
        }
        model.store.zero_grad();
        tape.backward_into(vars.total, &mut model.store);
        opt.step(&mut model.store, lr, |_| true);
        if !model.store.all_finite() {
            return Err(Error::Diverged {
                iteration: t,
                detail: "non-finite parameters after stage 1 update".into(),
            });
        }
        if let (Some(stats), Some(pool)) = (latent_stats.as_mut(), model.pool) {
            stats.observe_rows(model.store.value(pool.features))?;
        }
        if config.log_every > 0 && (t % config.log_every == 0 || t + 1 == config.stage1_iters) {
            trace.push(LossPoint {
                stage: 1,
                iteration: t,
                lr,
                lambda,
                loss: breakdown,
            });
        }
        if config.eval_every > 0 && (t + 1) % config.eval_every == 0 {
            evals.extend(monitor_point(&model, monitor, 1, t + 1)?);
        }
    }
    Ok(Stage1Output {
        model,
        latent_stats,
        class_stats,
        trace,
        evals,
    })
}

/// Retrains the decoder on class-balanced batches with every other
/// parameter group frozen.
pub fn train_stage2(
    mut model: ModelParams,
    config: &TrainConfig,
    train: &LongTailDataset,
    rng: &mut ChaCha8Rng,
    monitor: Option<&LongTailDataset>,
) -> Result<Stage2Output> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut sampler = BatchSampler::new(train, SamplingMode::ClassBalanced, rng.random())?;
    let split = split_classes(&train.counts);
    let monitor = monitor.map(|m| (m, &split));
    let trainable: Vec<bool> = model
        .store
        .iter()
        .map(|p| model.group_of(p.id) == ParamGroup::Decoder)
        .collect();
    let mut opt = Sgd::new(&model.store, config.momentum, config.weight_decay);
    let obj = Objective {
        smoothing: if config.stage2_smoothing { STAGE2_SMOOTHING } else { 0.0 },
        ..Objective::plain()
    };
    let mut trace = Vec::new();
    let mut evals = Vec::new();
    for t in 0..config.stage2_iters {
        let idx = sampler.next_batch(config.batch_size)?;
        let input = gather(train, &idx);
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |g| g != ParamGroup::Decoder);
        let (vars, _) = model.objective(&mut tape, &bound, &input, &labels, &obj)?;
        let breakdown = vars.breakdown(&tape, obj.weights);
        if !breakdown.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                detail: format!("stage 2 loss {breakdown:?}"),
            });
        }
        model.store.zero_grad();
        tape.backward_into(vars.total, &mut model.store);
        opt.step(&mut model.store, config.stage2_lr, |k| trainable[k]);
        if config.log_every > 0 && (t % config.log_every == 0 || t + 1 == config.stage2_iters) {
            trace.push(LossPoint {
                stage: 2,
                iteration: t,
                lr: config.stage2_lr,
                lambda: 0.0,
                loss: breakdown,
            });
        }
        if config.eval_every > 0 && (t + 1) % config.eval_every == 0 {
            evals.extend(monitor_point(&model, monitor, 2, t + 1)?);
        }
    }
    Ok(Stage2Output { model, trace, evals })
}

/// Output of a complete run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
}

/// Both stages followed by evaluation on `val`. All randomness comes from a
/// single generator seeded with `config.seed`.
pub fn run(config: &TrainConfig, train: &LongTailDataset, val: &LongTailDataset, label: &str) -> Result<RunOutput> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let monitor = (config.eval_every > 0).then_some(val);
    let split = split_classes(&train.counts);
    let s1 = train_stage1(config, train, &mut rng, monitor)?;
    let stage1_metrics = evaluate(&s1.model, val, &split)?;
    let s2 = train_stage2(s1.model, config, train, &mut rng, monitor)?;
    let final_metrics = evaluate(&s2.model, val, &split)?;
    let iterations = (config.stage1_iters + config.stage2_iters) as u64;
    let record = RunRecord {
        format: RUN_FORMAT.into(),
        label: label.into(),
        config_hash: config_hash(config),
        seed: config.seed,
        config: config.clone(),
        dataset: None,
        split,
        stage1_metrics,
        final_metrics,
        evals: s1.evals.into_iter().chain(s2.evals).collect(),
        loss_trace: s1.trace.into_iter().chain(s2.trace).collect(),
        latent_counts: s1.latent_stats.as_ref().map(|s| s.counts()).unwrap_or_default(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        timestamp: unix_timestamp(),
        checkpoint: None,
    };
    Ok(RunOutput {
        record,
        checkpoint: Checkpoint {
            model: s2.model,
            latent_stats: s1.latent_stats,
            class_stats: s1.class_stats,
            iteration: iterations,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longtail_data::{build_profile, synthesize_mixture, MixtureSpec, ProfileKind};

    pub(crate) fn tiny_data(seed: u64) -> (LongTailDataset, LongTailDataset) {
        let spec = MixtureSpec::random(4, 6, 3.0, 1.0, seed).unwrap();
        let counts = build_profile(4, 60, 10.0, ProfileKind::Exponential).unwrap();
        let train = synthesize_mixture(&spec, &counts).unwrap();
        let val = synthesize_mixture(&spec.with_seed(seed + 1), &[20; 4]).unwrap();
        (train, val)
    }

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            stage1_iters: 60,
            stage2_iters: 20,
            batch_size: 16,
            lr_decay_points: vec![40],
            num_latents: 4,
            hidden: vec![12],
            feature_dim: 4,
            log_every: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_steps() {
        let c = TrainConfig {
            lr: 1.0,
            lr_decay_points: vec![10, 20],
            lr_decay_factor: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!((c.lr_at(0), c.lr_at(10), c.lr_at(19), c.lr_at(25)), (1.0, 0.5, 0.5, 0.25));
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[1], 2.0), true);
        let b = store.add("b", Tensor::full(&[1], 2.0), false);
        let mut opt = Sgd::new(&store, 0.9, 0.1);
        for _ in 0..2 {
            store.get_mut(a).grad.fill(1.0);
            store.get_mut(b).grad.fill(1.0);
            opt.step(&mut store, 0.5, |_| true);
        }
        // a: v1 = 1.2, θ1 = 1.4; v2 = 0.9·1.2 + 1 + 0.14 = 2.22, θ2 = 0.29.
        assert!((store.value(a).item() - 0.29).abs() < 1e-15);
        // b: v1 = 1, θ1 = 1.5; v2 = 1.9, θ2 = 0.55.
        assert!((store.value(b).item() - 0.55).abs() < 1e-15);
    }

    #[test]
    fn stage1_counts_and_loss_drop() {
        let (train, _) = tiny_data(1);
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = train_stage1(&config, &train, &mut rng, None).unwrap();
        let stats = out.latent_stats.unwrap();
        assert!(stats.counts().iter().all(|&n| n == 60));
        let first = out.trace.first().unwrap().loss.total;
        let last = out.trace.last().unwrap().loss.total;
        assert!(last < first, "{first} -> {last}");
        let lambdas: Vec<f64> = out.trace.iter().map(|p| p.lambda).collect();
        assert!(lambdas.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn stage2_freezes_everything_but_decoder() {
        let (train, _) = tiny_data(2);
        let config = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s1 = train_stage1(&config, &train, &mut rng, None).unwrap();
        let before = s1.model.clone();
        let unchanged = train_stage2(before.clone(), &TrainConfig { stage2_iters: 0, ..config.clone() }, &train, &mut rng, None).unwrap();
        assert_eq!(unchanged.model, before);
        let s2 = train_stage2(before.clone(), &config, &train, &mut rng, None).unwrap();
        for (p, q) in before.store.iter().zip(s2.model.store.iter()) {
            let frozen = before.group_of(p.id) != ParamGroup::Decoder;
            assert_eq!(p.value == q.value, frozen, "{}", p.name);
            if frozen {
                assert!(q.grad.data().iter().all(|&g| g == 0.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let (train, val) = tiny_data(5);
        let config = TrainConfig {
            eval_every: 20,
            ..tiny_config()
        };
        let a = run(&config, &train, &val, "full").unwrap();
        let b = run(&config, &train, &val, "full").unwrap();
        assert_eq!(a.record.final_metrics, b.record.final_metrics);
        assert_eq!(a.record.loss_trace, b.record.loss_trace);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.record.evals.len(), 4);
    }

    #[test]
    fn raw_isda_tracks_class_stats() {
        let (train, val) = tiny_data(6);
        let config = TrainConfig {
            raw_isda_baseline: true,
            ..TrainConfig::baseline()
        };
        let config = TrainConfig {
            stage1_iters: 30,
            stage2_iters: 5,
            batch_size: 16,
            hidden: vec![8],
            feature_dim: 4,
            ..config
        };
        let out = run(&config, &train, &val, "raw-isda").unwrap();
        let stats = out.checkpoint.class_stats.unwrap();
        assert_eq!(stats.num_categories(), 4);
        assert_eq!(stats.dim(), 4);
        assert_eq!(stats.counts().iter().sum::<u64>(), 30 * 16);
        assert!(out.checkpoint.latent_stats.is_none());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { alpha: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { raw_isda_baseline: true, ..TrainConfig::default() }.validate().is_err());
        assert_eq!(TrainConfig::baseline().variant_label(), "baseline");
        assert_eq!(TrainConfig::default().variant_label(), "full");
    }
}
