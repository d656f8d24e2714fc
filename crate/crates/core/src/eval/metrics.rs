//! Metric kernels: MAPE with near-zero exclusion, RMSE, and
//! horizon-averaged Pearson correlation.

use super::{EvalError, EvalResult};

/// Default |truth| threshold below which a point is excluded from MAPE.
pub const DEFAULT_ZERO_FLOOR: f64 = 1e-6;

/// MAPE value plus how many points the zero floor excluded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapeOutcome {
    pub percent: f64,
    pub excluded: usize,
}

/// Mean absolute percentage error: 100 * mean(|y - p| / |y|) over all points
/// with |y| >= zero_floor.
pub fn mape(pred: &[f64], truth: &[f64], zero_floor: f64) -> EvalResult<MapeOutcome> {
    check_aligned(pred, truth)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, y) in pred.iter().zip(truth) {
        if y.abs() < zero_floor {
            continue;
        }
        sum += (y - p).abs() / y.abs();
        used += 1;
    }
    if used == 0 {
        return Err(EvalError::AllExcluded(truth.len()));
    }
    Ok(MapeOutcome {
        percent: 100.0 * sum / used as f64,
        excluded: truth.len() - used,
    })
}

/// Root mean squared error in the units of its inputs.
pub fn rmse(pred: &[f64], truth: &[f64]) -> EvalResult<f64> {
    check_aligned(pred, truth)?;
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Correlation aggregate plus the per-horizon values that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrOutcome {
    /// Mean Pearson correlation over horizons with defined values.
    pub value: f64,
    /// Per-horizon Pearson; None where a side had zero variance.
    pub per_horizon: Vec<Option<f64>>,
    pub excluded_horizons: usize,
}

/// Horizon-averaged Pearson correlation: for each horizon column, the
/// correlation across segments between predictions and truths; the aggregate
/// is the mean over horizons where both sides vary. Zero-variance horizons
/// are excluded with a warning.
pub fn corr(pred_rows: &[Vec<f64>], truth_rows: &[Vec<f64>]) -> EvalResult<CorrOutcome> {
    if pred_rows.len() != truth_rows.len() {
        return Err(EvalError::Shape(format!(
            "{} prediction rows vs {} truth rows",
            pred_rows.len(),
            truth_rows.len()
        )));
    }
    if pred_rows.len() < 2 {
        return Err(EvalError::Empty(format!(
            "correlation needs at least 2 segments, got {}",
            pred_rows.len()
        )));
    }
    let k = pred_rows[0].len();
    if k == 0 {
        return Err(EvalError::Empty("zero-length horizon".into()));
    }
    for (i, (p, t)) in pred_rows.iter().zip(truth_rows).enumerate() {
        if p.len() != k || t.len() != k {
            return Err(EvalError::Shape(format!(
                "row {i} has {} predictions and {} truths, expected {k}",
                p.len(),
                t.len()
            )));
        }
    }

    let mut per_horizon = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut used = 0usize;
    for h in 0..k {
        let p: Vec<f64> = pred_rows.iter().map(|r| r[h]).collect();
        let t: Vec<f64> = truth_rows.iter().map(|r| r[h]).collect();
        match pearson(&p, &t) {
            Some(r) => {
                per_horizon.push(Some(r));
                sum += r;
                used += 1;
            }
            None => {
                log::warn!("horizon {} excluded from CORR: zero variance", h + 1);
                per_horizon.push(None);
            }
        }
    }
    if used == 0 {
        return Err(EvalError::AllExcluded(k));
    }
    Ok(CorrOutcome {
        value: sum / used as f64,
        per_horizon,
        excluded_horizons: k - used,
    })
}

/// Pearson correlation of two equal-length samples; None when either side
/// has zero variance.
fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in a.iter().zip(b) {
        let da = x - mean_a;
        let db = y - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return None;
    }
    // Rounding can push a perfect correlation a hair past 1.
    Some((cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0))
}

fn check_aligned(pred: &[f64], truth: &[f64]) -> EvalResult<()> {
    if pred.len() != truth.len() {
        return Err(EvalError::Shape(format!(
            "{} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty("no points".into()));
    }
    Ok(())
}
