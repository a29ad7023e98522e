use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent_pool;
use crate::diffcore::Tape;
use crate::longtail_data::{ClassSplit, LongTailDataset, SplitGroup};
use crate::model::ModelParams;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracies. Split entries are `None` when the split has no classes
/// or no evaluation samples; per-class entries are `None` for classes absent
/// from the evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1_overall: f64,
    pub top1_many: Option<f64>,
    pub top1_medium: Option<f64>,
    pub top1_few: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    /// Evaluation samples per class.
    pub support: Vec<usize>,
}

impl Metrics {
    /// Aggregates predictions against labels. Classes outside `split` only
    /// count toward the overall accuracy.
    pub fn from_predictions(predictions: &[usize], labels: &[usize], num_classes: usize, split: &ClassSplit) -> Result<Self> {
        if predictions.len() != labels.len() || labels.is_empty() {
            return Err(Error::invalid("need one prediction per label and at least one sample"));
        }
        let mut correct = vec![0usize; num_classes];
        let mut support = vec![0usize; num_classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            if y >= num_classes {
                return Err(Error::invalid(format!("label {y} out of range for {num_classes} classes")));
            }
            support[y] += 1;
            correct[y] += usize::from(p == y);
        }
        let group = |g: SplitGroup| {
            let (mut c, mut n) = (0, 0);
            for k in 0..num_classes {
                if split.group_of(k) == Some(g) {
                    c += correct[k];
                    n += support[k];
                }
            }
            (n > 0).then(|| c as f64 / n as f64)
        };
        Ok(Self {
            top1_overall: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
            top1_many: group(SplitGroup::Many),
            top1_medium: group(SplitGroup::Medium),
            top1_few: group(SplitGroup::Few),
            per_class: correct
                .iter()
                .zip(&support)
                .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
                .collect(),
            support,
        })
    }

    pub fn split(&self, g: SplitGroup) -> Option<f64> {
        match g {
            SplitGroup::Many => self.top1_many,
            SplitGroup::Medium => self.top1_medium,
            SplitGroup::Few => self.top1_few,
        }
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Rows `indices` of `ds` as a `B × numel` batch.
pub fn gather(ds: &LongTailDataset, indices: &[usize]) -> Tensor {
    let numel = ds.shape.numel();
    let mut data = Vec::with_capacity(indices.len() * numel);
    for &i in indices {
        data.extend_from_slice(ds.sample(i));
    }
    Tensor::new(vec![indices.len(), numel], data).expect("non-empty batch")
}

/// Predicted class of every sample, evaluated in parallel chunks.
pub fn predict_all(model: &ModelParams, ds: &LongTailDataset) -> Result<Vec<usize>> {
    let indices: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<Vec<usize>> = indices
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let logits = model.predict(&gather(ds, chunk))?;
            Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

pub fn evaluate(model: &ModelParams, ds: &LongTailDataset, split: &ClassSplit) -> Result<Metrics> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let preds = predict_all(model, ds)?;
    Metrics::from_predictions(&preds, &ds.labels, model.config.num_classes, split)
}

/// Per-sample share of normalized similarity mass held by each latent; every
/// row sums to one.
pub fn latent_usage(model: &ModelParams, ds: &LongTailDataset) -> Result<Vec<Vec<f64>>> {
    if model.pool.is_none() {
        return Err(Error::invalid("model has no latent pool"));
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let per_chunk: Vec<Vec<Vec<f64>>> = indices
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, |_| true);
            let out = model.forward(&mut tape, &bound, &gather(ds, chunk), false)?;
            let lv = out.latent.expect("latent path present");
            let fused = latent_pool::fuse_var(&mut tape, out.features, lv.sims)?;
            let pooled = tape.block_mean_cols(fused, out.positions)?;
            let v = tape.value(pooled);
            let d = model.config.encoder.feature_dim;
            Ok((0..chunk.len()).map(|s| (d..v.rows()).map(|r| v.at(r, s)).collect()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.concat())
}
