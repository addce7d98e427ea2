//! Surrogate-vs-reference error measures on normalized polarization P̄ = P/N.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::integrate::PolarizationTrace;

/// Default echo search window in ps, centered on 2τ = 80.
pub const DEFAULT_ECHO_WINDOW: (f64, f64) = (60.0, 100.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorReport {
    pub l2: f64,
    pub rel_peak: f64,
    pub peak_time_ref: f64,
    pub peak_time_model: f64,
    pub peak_value_ref: f64,
    pub peak_value_model: f64,
}

fn check_comparable(a: &PolarizationTrace, b: &PolarizationTrace) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch(format!(
            "time grids differ: {:?} vs {:?}",
            a.grid, b.grid
        )));
    }
    if a.ensemble_count != b.ensemble_count {
        return Err(Error::GridMismatch(format!(
            "ensemble sizes differ: {} vs {}",
            a.ensemble_count, b.ensemble_count
        )));
    }
    if a.values.len() != b.values.len() || a.values.len() != a.grid.samples() {
        return Err(Error::GridMismatch(
            "trace length does not match its grid".into(),
        ));
    }
    Ok(())
}

/// Trapezoidal ∫ |P_ref/N − P_model/N|² dt over the whole grid.
pub fn l2_error(reference: &PolarizationTrace, model: &PolarizationTrace) -> Result<f64> {
    check_comparable(reference, model)?;
    let n = reference.ensemble_count as f64;
    let sq: Vec<f64> = reference
        .values
        .iter()
        .zip(&model.values)
        .map(|(r, m)| ((r - m) / n).norm_sqr())
        .collect();
    let g = &reference.grid;
    Ok((1..sq.len())
        .map(|k| 0.5 * (sq[k - 1] + sq[k]) * (g.time(k) - g.time(k - 1)))
        .sum())
}

/// Time and value of max |P̄| inside `window`; the earliest sample wins ties.
pub fn find_echo_peak(trace: &PolarizationTrace, window: (f64, f64)) -> Result<(f64, f64)> {
    let (lo, hi) = window;
    let n = trace.ensemble_count as f64;
    let mut best: Option<(f64, f64)> = None;
    for (k, v) in trace.values.iter().enumerate() {
        let t = trace.grid.time(k);
        if t < lo || t > hi {
            continue;
        }
        let a = v.norm() / n;
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((t, a));
        }
    }
    best.ok_or(Error::EmptyWindow { lo, hi })
}

/// |S_ref − S_model| / S_ref with S the windowed echo peak of |P̄|.
pub fn relative_peak_error(
    reference: &PolarizationTrace,
    model: &PolarizationTrace,
    window: (f64, f64),
) -> Result<f64> {
    Ok(evaluate(reference, model, window)?.rel_peak)
}

pub fn evaluate(
    reference: &PolarizationTrace,
    model: &PolarizationTrace,
    window: (f64, f64),
) -> Result<ErrorReport> {
    let l2 = l2_error(reference, model)?;
    let (t_ref, s_ref) = find_echo_peak(reference, window)?;
    let (t_model, s_model) = find_echo_peak(model, window)?;
    if s_ref == 0.0 {
        return Err(Error::ZeroReferencePeak);
    }
    Ok(ErrorReport {
        l2,
        rel_peak: ((s_ref - s_model) / s_ref).abs(),
        peak_time_ref: t_ref,
        peak_time_model: t_model,
        peak_value_ref: s_ref,
        peak_value_model: s_model,
    })
}
