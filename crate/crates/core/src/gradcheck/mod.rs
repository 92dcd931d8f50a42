//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Tensor};

mod suite;

pub use suite::{check_blocks, BlockCheck, BLOCK_THRESHOLD, MODEL_THRESHOLD};

/// Step used by the acceptance checks.
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        }
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks d f / d x for a scalar-valued tape function `f`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let reports = grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(reports[0])
}

/// Checks every input of a multi-input scalar function; one report per input.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if xs.iter().any(|x| x.dtype() != DType::F64) {
        return Err(Error::DTypeMismatch { op: "grad_check" });
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic = vars
        .iter()
        .map(|&v| Ok(tape.grad(v)?.expect("param leaves always receive a gradient")))
        .collect::<Result<Vec<_>>>()?;
    drop(tape);

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)?.item())
    };

    let mut work: Vec<Tensor> = xs.to_vec();
    let mut reports = Vec::with_capacity(xs.len());
    for j in 0..xs.len() {
        let mut report = GradCheckReport::empty();
        for i in 0..xs[j].numel() {
            let orig = xs[j].data()[i];
            work[j].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[j].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[j].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[j].data()[i];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error || i == 0 {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::f64(vec![4], vec![0.3, -1.2, 2.0, 5.0]).unwrap();
        let r = grad_check(|t, v| t.sum_all(v), &x, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::f64(vec![2, 3], vec![0.1, 0.5, -0.3, 1.0, 2.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let s = tape.softmax(v, 1).unwrap();
        let l = tape.sum_all(s).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap().unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
        let r = grad_check(
            |t, v| {
                let s = t.softmax(v, 1)?;
                t.sum_all(s)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.analytic.abs() < 1e-12 && r.numeric.abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_f32_inputs() {
        let x = Tensor::f32(vec![1], vec![1.0]).unwrap();
        assert!(grad_check(|t, v| t.sum_all(v), &x, 1e-5).is_err());
    }
}
