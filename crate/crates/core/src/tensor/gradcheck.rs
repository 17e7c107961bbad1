//! Central finite-difference gradient checking.

use super::Tensor;
use crate::error::{Error, Result};

/// Largest relative disagreement between `analytic` and the central
/// difference of `f` around `x`, over all coordinates:
/// `|a − c| / max(|a|, |c|, 1e-8)`.
///
/// Perturbed coordinates are rounded to `f32` before evaluation, so the
/// denominator uses the step actually taken rather than `2·step`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, analytic: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {step}")));
    }
    if analytic.len() != x.numel() {
        return Err(Error::dim(format!(
            "{} analytic entries for {} coordinates",
            analytic.len(),
            x.numel()
        )));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let plus = (orig as f64 + step) as f32;
        let minus = (orig as f64 - step) as f32;
        probe.data_mut()[i] = plus;
        let fp = f(&probe)?;
        probe.data_mut()[i] = minus;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("f is not finite at coordinate {i}")));
        }
        let central = (fp - fm) / (plus as f64 - minus as f64);
        let a = analytic[i];
        let denom = a.abs().max(central.abs()).max(1e-8);
        worst = worst.max((a - central).abs() / denom);
    }
    Ok(worst)
}
