//! Central-difference gradient checking.

use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Absolute floor in the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Flat indices that were compared, in order.
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub tol: f64,
    pub max_rel_error: f64,
    /// Index with the largest relative error.
    pub worst_index: Option<usize>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn from_pairs(indices: Vec<usize>, analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> Self {
        let rel_errors: Vec<f64> = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .collect();
        let (worst, max) = rel_errors
            .iter()
            .enumerate()
            .fold((None, 0.0f64), |(wi, wm), (i, &e)| {
                if wi.is_none() || e > wm || e.is_nan() {
                    (Some(i), e)
                } else {
                    (wi, wm)
                }
            });
        let passed = rel_errors.iter().all(|&e| e <= tol);
        Self {
            worst_index: worst.map(|i| indices[i]),
            indices,
            analytic,
            numeric,
            rel_errors,
            tol,
            max_rel_error: max,
            passed,
        }
    }

    /// Fraction of compared entries within tolerance.
    pub fn pass_fraction(&self) -> f64 {
        if self.rel_errors.is_empty() {
            return 1.0;
        }
        self.rel_errors.iter().filter(|&&e| e <= self.tol).count() as f64 / self.rel_errors.len() as f64
    }

    /// Indices whose relative error exceeds the tolerance.
    pub fn failing_indices(&self) -> Vec<usize> {
        self.indices
            .iter()
            .zip(&self.rel_errors)
            .filter(|(_, &e)| !(e <= self.tol))
            .map(|(&i, _)| i)
            .collect()
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), false);
    let out = f(&mut g, v)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check function must return a scalar".into()));
    }
    Ok(g.value(out).item())
}

/// Compare the analytic gradient of scalar-valued `f` at `x` with central
/// differences `(f(x+h) − f(x−h)) / 2h` for every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let first = eval_scalar(&f, x)?;
    let second = eval_scalar(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(v)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    Ok(GradCheckReport::from_pairs(
        (0..x.numel()).collect(),
        analytic,
        numeric,
        tol,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes_tight_tolerance() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-6,
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn corrupted_rule_fails_and_names_index() {
        let x = Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        // Claimed derivative of sin is wrong only at the third entry.
        let report = grad_check(
            |g, v| {
                let y = g.map(v, f64::sin, |t| if t > 0.25 { 2.0 * t.cos() } else { t.cos() });
                Ok(g.sum(y))
            },
            &x,
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_index, Some(2));
        assert_eq!(report.failing_indices(), vec![2]);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let err = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let c = calls.get();
                let y = g.scale(v, c);
                Ok(g.sum(y))
            },
            &x,
            1e-6,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::GradCheck(_)));
    }

    #[test]
    fn relative_error_uses_absolute_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-12);
    }
}
