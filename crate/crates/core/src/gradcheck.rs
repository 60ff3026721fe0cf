//! Central-difference gradient checking.

use crate::error::{Error, Result};

/// Perturbation used for every central difference.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor. Coordinates whose true gradient is zero are compared
/// absolutely; central differences at `FD_STEP` carry round-off near 1e-10
/// for O(1) losses, which this floor keeps well inside a 1e-4 tolerance.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central-difference estimate of the gradient of `f` at `point`.
pub fn numeric_gradient<F>(f: F, point: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let eval = |p: &[f64]| -> Result<f64> {
        let v = f(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteLoss)
        }
    };
    eval(point)?;
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let plus = eval(&probe)?;
        probe[i] = orig - FD_STEP;
        let minus = eval(&probe)?;
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * FD_STEP));
    }
    Ok(grad)
}

/// Compares an analytic gradient against central differences of `f`.
///
/// Passes iff the largest per-coordinate relative error is at most `tol`.
pub fn grad_check<F>(f: F, point: &[f64], analytic: &[f64], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != point.len() {
        return Err(Error::DimensionMismatch {
            expected: point.len(),
            actual: analytic.len(),
        });
    }
    let numeric = numeric_gradient(f, point)?;
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .collect();
    let (worst_index, max_rel_error) = rel_errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheckReport {
        analytic: analytic.to_vec(),
        numeric,
        rel_errors,
        max_rel_error,
        worst_index,
        tol,
        passed: max_rel_error <= tol,
    })
}
