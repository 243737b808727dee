//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Compare the analytic gradient of a scalar-valued function against
/// central finite differences.
///
/// `f` must rebuild its graph from the current parameter values on every
/// call (the probe nudges parameter coordinates in place between calls).
/// Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(mut f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: FnMut() -> Result<Tensor>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::invalid(
            "grad_check",
            format!("step {h} outside [1e-6, 1e-3]"),
        ));
    }
    for p in params {
        if !p.requires_grad() {
            return Err(Error::invalid("grad_check", "parameter without grad tracking"));
        }
        p.zero_grad();
    }

    let loss = f()?;
    let base = loss.item();
    if !base.is_finite() {
        return Err(Error::non_finite("grad_check", format!("f(theta) = {base}")));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (p, ga) in params.iter().zip(&analytic) {
        for i in 0..p.len() {
            let orig = p.with_data(|d| d[i]);
            p.with_data_mut(|d| d[i] = orig + h);
            let up = f()?.item();
            p.with_data_mut(|d| d[i] = orig - h);
            let down = f()?.item();
            p.with_data_mut(|d| d[i] = orig);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::non_finite(
                    "grad_check",
                    format!("probe at coordinate {i}: {up}, {down}"),
                ));
            }
            let numeric = (up - down) / (2.0 * h);
            let rel = (ga[i] - numeric).abs() / ga[i].abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
