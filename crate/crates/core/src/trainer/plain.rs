//! A plain MLP classifier with hand-written backpropagation, trained with the
//! same data stream, initialization and optimizer as the baseline variant.
//! Serves as an independent reference for the flags-off training path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{argmax, Metrics, TrainConfig, STAGE2_SMOOTHING};
use crate::error::{Error, Result};
use crate::longtail_data::{BatchSampler, ClassSplit, LongTailDataset, SampleShape, SamplingMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    out: usize,
    inp: usize,
    vw: Vec<f64>,
    vb: Vec<f64>,
}

impl Layer {
    fn new(out: usize, inp: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Tensor::randn(&[out, inp], std, rng).into_data(),
            b: vec![0.0; out],
            out,
            inp,
            vw: vec![0.0; out * inp],
            vb: vec![0.0; out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out)
            .map(|i| {
                let mut s = 0.0;
                for k in 0..self.inp {
                    s += self.w[i * self.inp + k] * x[k];
                }
                s + self.b[i]
            })
            .collect()
    }

    fn sgd(&mut self, gw: &[f64], gb: &[f64], lr: f64, momentum: f64, wd: f64) {
        for ((v, &g), th) in self.vw.iter_mut().zip(gw).zip(self.w.iter_mut()) {
            *v = momentum * *v + g + wd * *th;
            *th -= lr * *v;
        }
        for ((v, &g), th) in self.vb.iter_mut().zip(gb).zip(self.b.iter_mut()) {
            *v = momentum * *v + g + wd * *th;
            *th -= lr * *v;
        }
    }
}

/// Trained plain classifier.
#[derive(Debug, Clone)]
pub struct PlainClassifier {
    encoder: Vec<Layer>,
    decoder: Layer,
    feature_dim: usize,
    positions: usize,
}

struct Trace {
    /// Post-activation outputs of each encoder layer, input first.
    acts: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

impl PlainClassifier {
    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = vec![x.to_vec()];
        for (i, layer) in self.encoder.iter().enumerate() {
            let mut h = layer.apply(acts.last().unwrap());
            if i + 1 < self.encoder.len() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(h);
        }
        let out = acts.last().unwrap();
        let p = self.positions;
        let pooled: Vec<f64> = (0..self.feature_dim)
            .map(|d| out[d * p..(d + 1) * p].iter().sum::<f64>() / p as f64)
            .collect();
        let logits = self.decoder.apply(&pooled);
        Trace { acts, pooled, logits }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).logits
    }

    pub fn evaluate(&self, ds: &LongTailDataset, split: &ClassSplit) -> Result<Metrics> {
        let preds: Vec<usize> = (0..ds.len()).map(|i| argmax(&self.logits(ds.sample(i)))).collect();
        Metrics::from_predictions(&preds, &ds.labels, ds.num_classes(), split)
    }

    /// One SGD step on a batch; the encoder is left untouched when
    /// `encoder_frozen` is set.
    fn step(&mut self, xs: &[&[f64]], ys: &[usize], lr: f64, cfg: &TrainConfig, smoothing: f64, encoder_frozen: bool) {
        let n = xs.len() as f64;
        let c = self.decoder.out;
        let mut enc_gw: Vec<Vec<f64>> = self.encoder.iter().map(|l| vec![0.0; l.out * l.inp]).collect();
        let mut enc_gb: Vec<Vec<f64>> = self.encoder.iter().map(|l| vec![0.0; l.out]).collect();
        let mut dec_gw = vec![0.0; c * self.feature_dim];
        let mut dec_gb = vec![0.0; c];
        for (x, &y) in xs.iter().zip(ys) {
            let tr = self.trace(x);
            let m = tr.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = tr.logits.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            let g: Vec<f64> = (0..c)
                .map(|k| {
                    let target = smoothing / c as f64 + if k == y { 1.0 - smoothing } else { 0.0 };
                    ((tr.logits[k] - lse).exp() - target) * (1.0 / n)
                })
                .collect();
            for k in 0..c {
                for d in 0..self.feature_dim {
                    dec_gw[k * self.feature_dim + d] += g[k] * tr.pooled[d];
                }
                dec_gb[k] += g[k];
            }
            if encoder_frozen {
                continue;
            }
            let p = self.positions;
            let mut delta: Vec<f64> = (0..self.feature_dim * p)
                .map(|j| {
                    let d = j / p;
                    (0..c).map(|k| self.decoder.w[k * self.feature_dim + d] * g[k]).sum::<f64>() / p as f64
                })
                .collect();
            for l in (0..self.encoder.len()).rev() {
                let layer = &self.encoder[l];
                let input = &tr.acts[l];
                for i in 0..layer.out {
                    for k in 0..layer.inp {
                        enc_gw[l][i * layer.inp + k] += delta[i] * input[k];
                    }
                    enc_gb[l][i] += delta[i];
                }
                if l > 0 {
                    delta = (0..layer.inp)
                        .map(|k| {
                            if input[k] > 0.0 {
                                (0..layer.out).map(|i| layer.w[i * layer.inp + k] * delta[i]).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                }
            }
        }
        self.decoder.sgd(&dec_gw, &dec_gb, lr, cfg.momentum, cfg.weight_decay);
        if !encoder_frozen {
            for (l, layer) in self.encoder.iter_mut().enumerate() {
                layer.sgd(&enc_gw[l], &enc_gb[l], lr, cfg.momentum, cfg.weight_decay);
            }
        }
    }
}

/// Trains the plain classifier through both stages. Only vector inputs and
/// configurations without latent components are supported.
pub fn train_plain(config: &TrainConfig, train: &LongTailDataset) -> Result<PlainClassifier> {
    config.validate()?;
    if config.latent_on || config.raw_isda_baseline {
        return Err(Error::invalid("the plain classifier has no latent or augmentation path"));
    }
    let SampleShape::Vector { dim } = train.shape else {
        return Err(Error::invalid("the plain classifier takes vector inputs only"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let positions = config.grid_h * config.grid_w;
    let mut widths = vec![dim];
    widths.extend(&config.hidden);
    widths.push(config.feature_dim * positions);
    let last = widths.len() - 2;
    let encoder: Vec<Layer> = (0..widths.len() - 1)
        .map(|i| {
            let gain = if i < last { 2.0 } else { 1.0 };
            Layer::new(widths[i + 1], widths[i], (gain / widths[i] as f64).sqrt(), &mut rng)
        })
        .collect();
    let d = config.feature_dim;
    let decoder = Layer::new(train.num_classes(), d, (1.0 / d as f64).sqrt(), &mut rng);
    let mut model = PlainClassifier {
        encoder,
        decoder,
        feature_dim: d,
        positions,
    };

    let mut sampler = BatchSampler::new(train, SamplingMode::InstanceBalanced, rng.random())?;
    for t in 0..config.stage1_iters {
        let idx = sampler.next_batch(config.batch_size)?;
        let xs: Vec<&[f64]> = idx.iter().map(|&i| train.sample(i)).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        model.step(&xs, &ys, config.lr_at(t), config, 0.0, false);
    }
    let mut sampler = BatchSampler::new(train, SamplingMode::ClassBalanced, rng.random())?;
    let smoothing = if config.stage2_smoothing { STAGE2_SMOOTHING } else { 0.0 };
    for v in model.decoder.vw.iter_mut().chain(model.decoder.vb.iter_mut()) {
        *v = 0.0;
    }
    for _ in 0..config.stage2_iters {
        let idx = sampler.next_batch(config.batch_size)?;
        let xs: Vec<&[f64]> = idx.iter().map(|&i| train.sample(i)).collect();
        let ys: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        model.step(&xs, &ys, config.stage2_lr, config, smoothing, true);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longtail_data::split_classes;
    use crate::trainer::{run, tests::tiny_data};

    #[test]
    fn matches_baseline_path() {
        let (train, val) = tiny_data(8);
        let config = TrainConfig {
            stage1_iters: 80,
            stage2_iters: 30,
            batch_size: 16,
            lr_decay_points: vec![50],
            hidden: vec![10],
            feature_dim: 3,
            stage2_smoothing: true,
            ..TrainConfig::baseline()
        };
        let out = run(&config, &train, &val, "baseline").unwrap();
        let plain = train_plain(&config, &train).unwrap();
        let split = split_classes(&train.counts);
        assert_eq!(plain.evaluate(&val, &split).unwrap(), out.record.final_metrics);
        let model = &out.checkpoint.model;
        let logits = model.predict(&crate::trainer::gather(&val, &[0, 1, 2])).unwrap();
        for r in 0..3 {
            for (a, b) in logits.row(r).iter().zip(plain.logits(val.sample(r))) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }
}
