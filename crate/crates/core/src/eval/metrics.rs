use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of overlap thresholds `0, 0.05, …, 1` in the success plot.
pub const SUCCESS_STEPS: usize = 21;
pub const PRECISION_TAU: f64 = 20.0;
/// Largest pixel threshold in the precision plot.
pub const PRECISION_MAX_TAU: usize = 50;

pub fn success_threshold(i: usize) -> f64 {
    i as f64 / (SUCCESS_STEPS - 1) as f64
}

fn nonempty(v: &[f64], op: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Data(format!("{op}: empty input")));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite(format!("{op}: NaN in input")));
    }
    Ok(())
}

fn fraction(v: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    v.iter().filter(|x| pred(**x)).count() as f64 / v.len() as f64
}

/// `(t, fraction of IoU > t)` for the 21 thresholds.
pub fn success_curve(ious: &[f64]) -> Result<Vec<(f64, f64)>> {
    nonempty(ious, "success_curve")?;
    Ok((0..SUCCESS_STEPS)
        .map(|i| {
            let t = success_threshold(i);
            (t, fraction(ious, |x| x > t))
        })
        .collect())
}

/// Mean of the success curve.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    let c = success_curve(ious)?;
    Ok(c.iter().map(|(_, s)| s).sum::<f64>() / SUCCESS_STEPS as f64)
}

/// Fraction of frames with centre error `<= tau` pixels.
pub fn precision_at(errors: &[f64], tau: f64) -> Result<f64> {
    nonempty(errors, "precision_at")?;
    Ok(fraction(errors, |e| e <= tau))
}

/// `(tau, precision)` for integer `tau` in `0..=50`.
pub fn precision_curve(errors: &[f64]) -> Result<Vec<(f64, f64)>> {
    nonempty(errors, "precision_curve")?;
    Ok((0..=PRECISION_MAX_TAU)
        .map(|t| (t as f64, fraction(errors, |e| e <= t as f64)))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AoSr {
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
}

pub fn ao_sr(ious: &[f64]) -> Result<AoSr> {
    nonempty(ious, "ao_sr")?;
    Ok(AoSr {
        ao: ious.iter().sum::<f64>() / ious.len() as f64,
        sr50: fraction(ious, |x| x > 0.5),
        sr75: fraction(ious, |x| x > 0.75),
    })
}
