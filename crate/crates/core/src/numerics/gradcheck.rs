//! Central finite-difference gradient checker.

use crate::error::{PcsrError, Result};

/// Compares the analytic gradient returned by `f` at `params` with central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, one coordinate at a time.
///
/// Returns the largest elementwise relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(mut f: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(PcsrError::config(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps:e}"
        )));
    }
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(PcsrError::Numeric(format!("loss is {loss} at base point")));
    }
    if analytic.len() != params.len() {
        return Err(PcsrError::config(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let (plus, _) = f(&theta)?;
        theta[i] = orig - eps;
        let (minus, _) = f(&theta)?;
        theta[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(PcsrError::Numeric(format!(
                "loss is non-finite when perturbing parameter {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
