//! Full gradient verification: every kernel plus the combined training
//! objective with respect to each parameter group.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::gradcheck::grad_check_inner;
use crate::diffcore::suite::{kernel_suite, merge_worst};
use crate::diffcore::{Fault, GradCheckReport, Tape};
use crate::error::Result;
use crate::longtail_data::SampleShape;
use crate::model::{Bound, EncoderConfig, LossWeights, ModelConfig, ModelParams, Objective, ParamGroup};
use crate::tensor::Tensor;

/// Tolerance for the combined objective.
pub const END_TO_END_TOLERANCE: f64 = 1e-4;

const GROUPS: [(ParamGroup, &str); 4] = [
    (ParamGroup::Encoder, "objective wrt encoder"),
    (ParamGroup::LatentPool, "objective wrt latent pool"),
    (ParamGroup::LatentClassifier, "objective wrt latent cls"),
    (ParamGroup::Decoder, "objective wrt decoder"),
];

fn random_cov(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let a = Tensor::randn(&[d, d], 1.0, rng);
    a.matmul(&a.transpose()).expect("square").map(|v| v / d as f64)
}

/// Checks the full objective on `instances` random models with a batch of
/// two, one report per parameter group plus one for the pooled-feature
/// augmentation variant.
pub fn end_to_end_suite(seed: u64, instances: usize, fault: Option<Fault>) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Vec::new();
    for _ in 0..instances {
        let (d, m, c) = (rng.random_range(2..4), rng.random_range(2..4), rng.random_range(2..4));
        let grid = (rng.random_range(1..3), 2);
        let config = ModelConfig {
            encoder: EncoderConfig {
                input: SampleShape::Vector { dim: 3 },
                hidden: vec![4],
                feature_dim: d,
                grid,
            },
            num_classes: c,
            num_latents: Some(m),
        };
        let params = ModelParams::init(config, &mut rng)?;
        let input = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let labels = [rng.random_range(0..c), rng.random_range(0..c)];
        let obj = Objective {
            weights: LossWeights {
                alpha: rng.random_range(0.1..1.0),
                beta: rng.random_range(0.1..1.0),
                gamma: 1.0,
            },
            recon: true,
            aug: true,
            lambda: rng.random_range(0.1..1.0),
            latent_covs: Some(Arc::new((0..m).map(|_| random_cov(&mut rng, d)).collect())),
            ..Objective::default()
        };
        let mut reports = Vec::new();
        for (group, name) in GROUPS {
            reports.push(check_group(&params, &[group], name, &input, &labels, &obj, fault)?);
        }

        let baseline = ModelParams::init(
            ModelConfig {
                num_latents: None,
                ..params.config.clone()
            },
            &mut rng,
        )?;
        let isda = Objective {
            lambda: obj.lambda,
            class_covs: Some(Arc::new((0..c).map(|_| random_cov(&mut rng, d)).collect())),
            ..Objective::plain()
        };
        reports.push(check_group(
            &baseline,
            &[ParamGroup::Encoder, ParamGroup::Decoder],
            "pooled-feature augmentation",
            &input,
            &labels,
            &isda,
            fault,
        )?);
        merge_worst(&mut worst, reports);
    }
    Ok(worst)
}

fn check_group(
    params: &ModelParams,
    groups: &[ParamGroup],
    name: &str,
    input: &Tensor,
    labels: &[usize],
    obj: &Objective,
    fault: Option<Fault>,
) -> Result<GradCheckReport> {
    let checked: Vec<_> = params.store.iter().filter(|p| groups.contains(&params.group_of(p.id))).map(|p| p.id).collect();
    let inputs: Vec<Tensor> = checked.iter().map(|&id| params.store.value(id).clone()).collect();
    grad_check_inner(name, &inputs, END_TO_END_TOLERANCE, fault, |tape: &mut Tape, vars| {
        let bound = Bound(
            params
                .store
                .iter()
                .map(|p| match checked.iter().position(|&id| id == p.id) {
                    Some(k) => vars[k],
                    None => tape.constant(p.value.clone()),
                })
                .collect(),
        );
        Ok(params.objective(tape, &bound, input, labels, obj)?.0.total)
    })
}

/// Kernel checks followed by the end-to-end checks.
pub fn full_suite(seed: u64, instances: usize, fault: Option<Fault>) -> Result<Vec<GradCheckReport>> {
    let mut reports = kernel_suite(seed, instances, fault)?;
    reports.extend(end_to_end_suite(seed.wrapping_add(1), instances, fault)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_gradients_match() {
        for r in end_to_end_suite(3, 2, None).unwrap() {
            assert!(r.pass, "{r}");
        }
    }

    #[test]
    fn sigmoid_fault_breaks_latent_path() {
        let reports = end_to_end_suite(3, 1, Some(Fault::SigmoidBackwardSign)).unwrap();
        let pool = reports.iter().find(|r| r.op == "objective wrt latent pool").unwrap();
        assert!(!pool.pass, "{pool}");
    }
}
