//! Turning token importances into one segment-level score.

use crate::error::{Error, Result};
use crate::explainers::Attribution;

/// Offset added to every importance so the power mean never sees zero.
pub const POSITIVITY_OFFSET: f64 = 1e-9;

/// Shifts the vector by `|min|` when it has a negative entry, then adds
/// [`POSITIVITY_OFFSET`] everywhere. Order is preserved and the output is
/// strictly positive.
pub fn regularize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if min < 0.0 { min.abs() } else { 0.0 };
    values.iter().map(|v| v + shift + POSITIVITY_OFFSET).collect()
}

/// Generalized mean `((1/n) Σ e^p)^(1/p)`; `p = 0` is the geometric mean.
///
/// Values are scaled by the max (p > 0) or min (p < 0) before exponentiation
/// so |p| up to the hundreds neither overflows nor underflows.
pub fn power_mean(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("power mean of an empty vector"));
    }
    if !p.is_finite() {
        return Err(Error::invalid(format!("power mean exponent {p} is not finite")));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::invalid(format!(
            "power mean needs strictly positive finite values, got {v}"
        )));
    }
    let n = values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = if p == 0.0 {
        (values.iter().map(|v| v.ln()).sum::<f64>() / n).exp()
    } else if p == 1.0 {
        values.iter().sum::<f64>() / n
    } else {
        let scale = if p > 0.0 { max } else { min };
        let acc = values.iter().map(|v| (v / scale).powf(p)).sum::<f64>() / n;
        scale * acc.powf(1.0 / p)
    };
    Ok(mean.clamp(min, max))
}

/// Concatenates all segment attributions, regularizes them jointly and takes
/// the power mean.
pub fn aggregate(attribution: &Attribution, p: f64) -> Result<f64> {
    let flat = attribution.concatenated();
    if flat.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty attribution"));
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("attribution contains non-finite values"));
    }
    power_mean(&regularize(&flat), p)
}
