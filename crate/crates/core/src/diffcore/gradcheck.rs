//! Finite-difference verification of backward rules.

use std::fmt;

use super::tape::{Fault, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Number of input scalars compared.
    pub checked: usize,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err={:.3e} tol={:.0e} scalars={:<5} {}",
            self.op,
            self.max_rel_error,
            self.tolerance,
            self.checked,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences over every scalar of every input.
pub fn grad_check<F>(op: &str, inputs: &[Tensor], tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_inner(op, inputs, tolerance, None, f)
}

#[doc(hidden)]
pub fn grad_check_with_fault<F>(
    op: &str,
    inputs: &[Tensor],
    tolerance: f64,
    fault: Fault,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_inner(op, inputs, tolerance, Some(fault), f)
}

fn fresh_tape(fault: Option<Fault>) -> Tape {
    fault.map_or_else(Tape::new, Tape::with_fault)
}

pub(crate) fn grad_check_inner<F>(
    op: &str,
    inputs: &[Tensor],
    tolerance: f64,
    fault: Option<Fault>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if tolerance <= 0.0 {
        return Err(Error::invalid("gradient check tolerance must be positive"));
    }
    let mut tape = fresh_tape(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.watch(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::invalid("gradient check needs a scalar output"));
    }
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = fresh_tape(fault);
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut work = inputs.to_vec();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for (ti, grad) in analytic.iter().enumerate() {
        for k in 0..work[ti].numel() {
            let orig = work[ti].data()[k];
            work[ti].data_mut()[k] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[ti].data_mut()[k] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(relative_error(grad.data()[k], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error: max_err,
        tolerance,
        pass: max_err <= tolerance,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive_tolerance() {
        let r = grad_check("sigmoid", &[Tensor::scalar(0.0)], 0.0, |t, v| Ok(t.sigmoid(v[0])));
        assert!(r.is_err());
    }

    #[test]
    fn rejects_tensor_output() {
        let r = grad_check("sigmoid", &[Tensor::zeros(&[2])], 1e-5, |t, v| Ok(t.sigmoid(v[0])));
        assert!(r.is_err());
    }

    #[test]
    fn sign_fault_is_detected() {
        let x = Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let ok = grad_check("sigmoid", std::slice::from_ref(&x), 1e-5, |t, v| {
            let y = t.sigmoid(v[0]);
            t.dot(y, Tensor::full(&[3], 1.0))
        })
        .unwrap();
        assert!(ok.pass);
        let bad = grad_check_with_fault("sigmoid", &[x], 1e-5, Fault::SigmoidBackwardSign, |t, v| {
            let y = t.sigmoid(v[0]);
            t.dot(y, Tensor::full(&[3], 1.0))
        })
        .unwrap();
        assert!(!bad.pass);
        assert!(bad.max_rel_error > 1.0);
    }
}
