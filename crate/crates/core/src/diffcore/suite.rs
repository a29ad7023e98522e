//! Gradient checks over every kernel at random double-precision points.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check_inner as check, GradCheckReport};
use super::tape::{Fault, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Tolerance for individual kernels.
pub const KERNEL_TOLERANCE: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Entries bounded away from zero so ReLU stays differentiable under the
/// finite-difference step.
fn randn_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v = if *v < 0.0 { -0.5 } else { 0.5 };
        }
    }
    t
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let a = randn(rng, &[d, d]);
    let mut c = a.matmul(&a.transpose()).expect("square");
    for v in c.data_mut() {
        *v /= d as f64;
    }
    c
}

fn project(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = tape.value(y).shape().to_vec();
    let r = Tensor::randn(&shape, 1.0, &mut rng);
    tape.dot(y, r)
}

/// Checks every kernel on `instances` random points drawn from `seed`.
/// Returns one report per kernel holding the worst instance.
pub fn kernel_suite(seed: u64, instances: usize, fault: Option<Fault>) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<GradCheckReport> = Vec::new();
    for _ in 0..instances {
        let pseed: u64 = rng.random();
        let mut reports = Vec::new();
        let tol = KERNEL_TOLERANCE;

        let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        let a = randn(&mut rng, &[m, k]);
        let b = randn(&mut rng, &[k, n]);
        reports.push(check("matmul", &[a.clone(), b], tol, fault, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, pseed)
        })?);
        reports.push(check("transpose", std::slice::from_ref(&a), tol, fault, |t, v| {
            let y = t.transpose(v[0])?;
            project(t, y, pseed)
        })?);
        let a2 = randn(&mut rng, &[m, k]);
        reports.push(check("add", &[a.clone(), a2.clone()], tol, fault, |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y, pseed)
        })?);
        reports.push(check("scale", std::slice::from_ref(&a), tol, fault, |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y, pseed)
        })?);
        let x = randn(&mut rng, &[m, k]).map(|v| 3.0 * v);
        reports.push(check("sigmoid", std::slice::from_ref(&x), tol, fault, |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, pseed)
        })?);
        reports.push(check("relu", &[randn_off_zero(&mut rng, &[m, k])], tol, fault, |t, v| {
            let y = t.relu(v[0]);
            project(t, y, pseed)
        })?);
        let s = randn(&mut rng, &[3, 4, 2]);
        for axis in 0..3 {
            let name = ["softmax(axis=0)", "softmax(axis=1)", "softmax(axis=2)"][axis];
            reports.push(check(name, std::slice::from_ref(&s), tol, fault, |t, v| {
                let y = t.softmax(v[0], axis)?;
                project(t, y, pseed)
            })?);
        }
        let (d_in, d_out, p) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let xs = randn(&mut rng, &[d_in, p]);
        let w = randn(&mut rng, &[d_out, d_in]);
        let bias = randn(&mut rng, &[d_out]);
        reports.push(check("linear_1x1", &[xs, w, bias], tol, fault, |t, v| {
            let y = t.linear_1x1(v[0], v[1], v[2])?;
            project(t, y, pseed)
        })?);
        let (rows, classes) = (rng.random_range(1..6), rng.random_range(2..6));
        let logits = randn(&mut rng, &[rows, classes]).map(|v| 2.0 * v);
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        reports.push(check("cross_entropy", std::slice::from_ref(&logits), tol, fault, |t, v| {
            t.cross_entropy(v[0], &targets)
        })?);
        reports.push(check("cross_entropy(smoothed)", &[logits], tol, fault, |t, v| {
            t.cross_entropy_smoothed(v[0], &targets, 0.1)
        })?);
        let (d, blocks, blk) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..4));
        let ga = randn(&mut rng, &[d, blocks * blk]);
        let gb = randn(&mut rng, &[d, blocks * blk]);
        reports.push(check("block_gram", &[ga.clone(), gb], tol, fault, |t, v| {
            let y = t.block_gram(v[0], v[1], blk)?;
            project(t, y, pseed)
        })?);
        reports.push(check("block_mean_cols", std::slice::from_ref(&ga), tol, fault, |t, v| {
            let y = t.block_mean_cols(v[0], blk)?;
            project(t, y, pseed)
        })?);
        let top = randn(&mut rng, &[2, blocks * blk]);
        reports.push(check("concat_rows", &[ga, top], tol, fault, |t, v| {
            let y = t.concat_rows(&[v[0], v[1]])?;
            project(t, y, pseed)
        })?);
        let stacked = randn(&mut rng, &[d * blk, blocks]);
        reports.push(check("split_channels", &[stacked], tol, fault, |t, v| {
            let y = t.split_channels(v[0], blk)?;
            project(t, y, pseed)
        })?);
        reports.push(check("weighted_sum", &[a, a2], tol, fault, |t, v| {
            let y = t.weighted_sum(&[(v[0], 0.3), (v[1], -2.0)])?;
            project(t, y, pseed)
        })?);

        let (nrow, kcls, dim) = (rng.random_range(1..5), rng.random_range(2..5), rng.random_range(1..5));
        let feats = randn(&mut rng, &[nrow, dim]);
        let cw = randn(&mut rng, &[kcls, dim]);
        let cb = randn(&mut rng, &[kcls]);
        let labels: Vec<usize> = (0..nrow).map(|_| rng.random_range(0..kcls)).collect();
        let covs = Arc::new((0..kcls).map(|_| random_psd(&mut rng, dim)).collect::<Vec<_>>());
        let lambda = rng.random_range(0.1..1.0);
        reports.push(check("augmented_cross_entropy", &[feats, cw, cb], tol, fault, |t, v| {
            t.augmented_cross_entropy(v[0], v[1], v[2], &labels, covs.clone(), lambda)
        })?);

        merge_worst(&mut worst, reports);
    }
    Ok(worst)
}

/// Keeps, per op name, the report with the largest error.
pub fn merge_worst(worst: &mut Vec<GradCheckReport>, reports: Vec<GradCheckReport>) {
    for r in reports {
        match worst.iter_mut().find(|w| w.op == r.op) {
            Some(w) => {
                w.checked += r.checked;
                if r.max_rel_error > w.max_rel_error || r.max_rel_error.is_nan() {
                    w.max_rel_error = r.max_rel_error;
                }
                w.pass = w.pass && r.pass;
            }
            None => worst.push(r),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_kernels_pass() {
        let reports = kernel_suite(7, 2, None).unwrap();
        for r in &reports {
            assert!(r.pass, "{r}");
        }
    }

    #[test]
    fn sigmoid_fault_fails_only_sigmoid() {
        let reports = kernel_suite(7, 1, Some(Fault::SigmoidBackwardSign)).unwrap();
        for r in &reports {
            assert_eq!(r.pass, r.op != "sigmoid", "{r}");
        }
    }
}
