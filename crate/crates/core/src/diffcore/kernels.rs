//! Forward kernels and their backward rules, on plain tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, len, inner)` strides for reducing along `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..len {
                let e = (data[at(k)] - m).exp();
                data[at(k)] = e;
                sum += e;
            }
            for k in 0..len {
                data[at(k)] /= sum;
            }
        }
    }
    Ok(out)
}

pub fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_layout(y.shape(), axis).expect("validated in forward");
    let mut dx = g.clone();
    let (yd, gd) = (y.data(), g.data());
    let out = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..len {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    dx
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean smoothed cross-entropy; returns the loss and the row softmax.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], smoothing: f64) -> Result<(f64, Tensor)> {
    if !logits.is_matrix() || logits.rows() != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} for {} targets", logits.shape(), targets.len()),
        ));
    }
    let (n, c) = (logits.rows(), logits.cols());
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::invalid(format!("target {t} out of range for {c} classes")));
    }
    let mut probs = Tensor::zeros(&[n, c]);
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        let mut loss = -(1.0 - smoothing) * (row[t] - lse);
        if smoothing > 0.0 {
            let mean_logp: f64 = row.iter().map(|v| v - lse).sum::<f64>() / c as f64;
            loss -= smoothing * mean_logp;
        }
        total += loss;
        for (k, &v) in row.iter().enumerate() {
            probs.set(i, k, (v - lse).exp());
        }
    }
    Ok((total / n as f64, probs))
}

pub fn cross_entropy_backward(probs: &Tensor, targets: &[usize], smoothing: f64, g: f64) -> Tensor {
    let (n, c) = (probs.rows(), probs.cols());
    let scale = g / n as f64;
    let mut d = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        for k in 0..c {
            let mut q = smoothing / c as f64;
            if k == t {
                q += 1.0 - smoothing;
            }
            d.set(i, k, (probs.at(i, k) - q) * scale);
        }
    }
    d
}

pub fn block_gram(a: &Tensor, b: &Tensor, block: usize) -> Tensor {
    let (d, n) = (a.rows(), a.cols());
    let nb = n / block;
    let mut out = Tensor::zeros(&[n, block]);
    let (ad, bd) = (a.data(), b.data());
    for s in 0..nb {
        for i in 0..block {
            for j in 0..block {
                let mut acc = 0.0;
                for ch in 0..d {
                    acc += ad[ch * n + s * block + i] * bd[ch * n + s * block + j];
                }
                out.set(s * block + i, j, acc);
            }
        }
    }
    out
}

pub fn block_gram_backward(a: &Tensor, b: &Tensor, g: &Tensor, block: usize) -> (Tensor, Tensor) {
    let (d, n) = (a.rows(), a.cols());
    let nb = n / block;
    let mut da = Tensor::zeros(&[d, n]);
    let mut db = Tensor::zeros(&[d, n]);
    for s in 0..nb {
        for i in 0..block {
            for j in 0..block {
                let gv = g.at(s * block + i, j);
                if gv == 0.0 {
                    continue;
                }
                for ch in 0..d {
                    let ia = ch * n + s * block + i;
                    let jb = ch * n + s * block + j;
                    da.data_mut()[ia] += gv * b.data()[jb];
                    db.data_mut()[jb] += gv * a.data()[ia];
                }
            }
        }
    }
    (da, db)
}

fn validate_augmented(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    labels: &[usize],
    covs: &[Tensor],
) -> Result<()> {
    let ok = x.is_matrix()
        && w.is_matrix()
        && x.cols() == w.cols()
        && b.numel() == w.rows()
        && labels.len() == x.rows()
        && covs.len() == w.rows()
        && covs.iter().all(|c| c.shape() == [x.cols(), x.cols()]);
    if !ok {
        return Err(Error::shape(
            "augmented_cross_entropy",
            format!(
                "x {:?}, w {:?}, b {:?}, {} labels, {} covariances",
                x.shape(),
                w.shape(),
                b.shape(),
                labels.len(),
                covs.len()
            ),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= w.rows()) {
        return Err(Error::invalid(format!("label {l} out of range for {} classes", w.rows())));
    }
    Ok(())
}

/// `Σ_sym · v` with `Σ_sym = (Σ + Σᵀ)/2`.
fn sym_mul(cov: &Tensor, v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let c = cov.data();
    (0..d)
        .map(|r| {
            (0..d)
                .map(|k| 0.5 * (c[r * d + k] + c[k * d + r]) * v[k])
                .sum()
        })
        .collect()
}

/// Logits `z` of the augmented bound for one row, relative to its label.
pub fn augmented_logits(x: &[f64], w: &Tensor, b: &[f64], label: usize, cov: &Tensor, lambda: f64) -> Vec<f64> {
    let (k, d) = (w.rows(), w.cols());
    let wy = w.row(label);
    (0..k)
        .map(|j| {
            if j == label {
                return 0.0;
            }
            let dw: Vec<f64> = w.row(j).iter().zip(wy).map(|(a, c)| a - c).collect();
            let lin: f64 = dw.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + (b[j] - b[label]);
            if lambda == 0.0 {
                return lin;
            }
            let sdw = sym_mul(cov, &dw);
            let quad: f64 = (0..d).map(|r| dw[r] * sdw[r]).sum();
            lin + 0.5 * lambda * quad
        })
        .collect()
}

pub fn augmented_ce_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    labels: &[usize],
    covs: &[Tensor],
    lambda: f64,
) -> Result<(f64, Tensor)> {
    validate_augmented(x, w, b, labels, covs)?;
    let (n, k) = (x.rows(), w.rows());
    let mut probs = Tensor::zeros(&[n, k]);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = augmented_logits(x.row(i), w, b.data(), y, &covs[y], lambda);
        let lse = log_sum_exp(&z);
        total += lse;
        for (j, zj) in z.iter().enumerate() {
            probs.set(i, j, (zj - lse).exp());
        }
    }
    Ok((total / n as f64, probs))
}

pub fn augmented_ce_backward(
    x: &Tensor,
    w: &Tensor,
    labels: &[usize],
    covs: &[Tensor],
    lambda: f64,
    probs: &Tensor,
    g: f64,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (x.rows(), x.cols());
    let k = w.rows();
    let scale = g / n as f64;
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dw = Tensor::zeros(&[k, d]);
    let mut db = Tensor::zeros(&[k]);
    for (i, &y) in labels.iter().enumerate() {
        let xi = x.row(i);
        let wy = w.row(y).to_vec();
        for j in 0..k {
            if j == y {
                continue;
            }
            let p = probs.at(i, j) * scale;
            if p == 0.0 {
                continue;
            }
            let diff: Vec<f64> = w.row(j).iter().zip(&wy).map(|(a, c)| a - c).collect();
            let mut v = xi.to_vec();
            if lambda != 0.0 {
                for (vr, s) in v.iter_mut().zip(sym_mul(&covs[y], &diff)) {
                    *vr += lambda * s;
                }
            }
            for r in 0..d {
                dx.data_mut()[i * d + r] += p * diff[r];
                dw.data_mut()[j * d + r] += p * v[r];
                dw.data_mut()[y * d + r] -= p * v[r];
            }
            db.data_mut()[j] += p;
            db.data_mut()[y] -= p;
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(40.0) - 1.0).abs() <= 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        assert!(softmax(&Tensor::zeros(&[2, 2]), 2).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[3], 0.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(cross_entropy(&logits, &[0, 1], 0.0).is_err());
    }

    #[test]
    fn smoothing_on_uniform_logits_is_log_c() {
        let logits = Tensor::zeros(&[2, 4]);
        let (l, _) = cross_entropy(&logits, &[0, 3], 0.1).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-14);
    }
}
