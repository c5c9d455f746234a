use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares the analytic gradient returned by `objective` at `params` with
/// `(f(θ+h) − f(θ−h)) / 2h`, per coordinate. The relative error of a
/// coordinate is `|g_a − g_n| / max(|g_a|, |g_n|, 1e−8)`.
pub fn grad_check<F>(mut objective: F, params: &[f64], h: f64, tol: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let (value, analytic) = objective(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("objective value"));
    }
    if analytic.len() != params.len() {
        return Err(Error::Dimension {
            context: "analytic gradient",
            expected: params.len(),
            found: analytic.len(),
        });
    }
    let mut probe = params.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let (plus, _) = objective(&probe)?;
        probe[i] = params[i] - h;
        let (minus, _) = objective(&probe)?;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("objective value"));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheck {
        max_relative_error: worst.0,
        worst_index: worst.1,
        passed: worst.0 < tol,
    })
}
