//! Forecast evaluation: MAPE/RMSE/CORR metrics over overlapping-horizon
//! predictions, JSON reports, and standalone SVG plots.
//!
//! All metrics run in original (scaler-inverted) units. Near-zero truths are
//! excluded from MAPE under a configurable floor and the exclusion count is
//! reported, so collapse periods cannot silently blow up the percentage.

mod metrics;
mod plot;

use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Scaler, SegmentSet};
use crate::util::atomic_write_json;

pub use metrics::{corr, mape, rmse, CorrOutcome, MapeOutcome, DEFAULT_ZERO_FLOOR};
pub use plot::emit_plot;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("all {0} points were excluded from the metric")]
    AllExcluded(usize),
    #[error("horizon {h} is out of range 1..={k}")]
    HorizonOutOfRange { h: usize, k: usize },
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Aligned predictions and truths in original units, one row per segment.
/// Anchor dates mark each row's first forecast day and advance by exactly
/// one day per row (the 1-day sliding window).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastMatrix {
    pub predictions: Vec<Vec<f64>>,
    pub truths: Vec<Vec<f64>>,
    pub anchor_dates: Vec<NaiveDate>,
    pub horizon: usize,
}

impl ForecastMatrix {
    pub fn new(
        predictions: Vec<Vec<f64>>,
        truths: Vec<Vec<f64>>,
        anchor_dates: Vec<NaiveDate>,
        horizon: usize,
    ) -> EvalResult<Self> {
        if predictions.is_empty() {
            return Err(EvalError::Empty("forecast matrix has no rows".into()));
        }
        if predictions.len() != truths.len() || predictions.len() != anchor_dates.len() {
            return Err(EvalError::Shape(format!(
                "{} prediction rows, {} truth rows, {} dates",
                predictions.len(),
                truths.len(),
                anchor_dates.len()
            )));
        }
        for (i, (p, t)) in predictions.iter().zip(&truths).enumerate() {
            if p.len() != horizon || t.len() != horizon {
                return Err(EvalError::Shape(format!(
                    "row {i} has {} predictions and {} truths, expected {horizon}",
                    p.len(),
                    t.len()
                )));
            }
        }
        for w in anchor_dates.windows(2) {
            if w[1] != w[0] + Days::new(1) {
                return Err(EvalError::Shape(format!(
                    "anchor dates must advance by one day, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self {
            predictions,
            truths,
            anchor_dates,
            horizon,
        })
    }

    /// Assembles a matrix from scaled-space model outputs and the segments
    /// they forecast, inverting both sides to original units.
    pub fn from_scaled(
        set: &SegmentSet,
        scaled_predictions: &[Vec<f64>],
        scaler: &Scaler,
    ) -> EvalResult<Self> {
        if scaled_predictions.len() != set.segments.len() {
            return Err(EvalError::Shape(format!(
                "{} prediction rows for {} segments",
                scaled_predictions.len(),
                set.segments.len()
            )));
        }
        let mut predictions = Vec::with_capacity(set.segments.len());
        let mut truths = Vec::with_capacity(set.segments.len());
        let mut anchor_dates = Vec::with_capacity(set.segments.len());
        for (segment, row) in set.segments.iter().zip(scaled_predictions) {
            predictions.push(scaler.invert_target(row)?);
            truths.push(scaler.invert_target(segment.y.data())?);
            anchor_dates.push(set.forecast_start_date(segment));
        }
        Self::new(predictions, truths, anchor_dates, set.k)
    }

    pub fn segment_count(&self) -> usize {
        self.predictions.len()
    }

    fn flat(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.predictions.iter().flatten().copied().collect(),
            self.truths.iter().flatten().copied().collect(),
        )
    }

    fn column(&self, rows: &[Vec<f64>], h: usize) -> Vec<f64> {
        rows.iter().map(|r| r[h]).collect()
    }
}

/// One non-overlapping series: each segment's h-th-day-ahead value.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSeries {
    /// 1-based horizon the series was sliced at.
    pub horizon: usize,
    pub dates: Vec<NaiveDate>,
    pub predictions: Vec<f64>,
    pub truths: Vec<f64>,
}

/// Slices the h-th horizon (1-based) out of the matrix: one point per
/// segment, dated anchor + (h-1) days, values copied without smoothing.
pub fn horizon_series(matrix: &ForecastMatrix, h: usize) -> EvalResult<HorizonSeries> {
    if h == 0 || h > matrix.horizon {
        return Err(EvalError::HorizonOutOfRange {
            h,
            k: matrix.horizon,
        });
    }
    Ok(HorizonSeries {
        horizon: h,
        dates: matrix
            .anchor_dates
            .iter()
            .map(|d| *d + Days::new((h - 1) as u64))
            .collect(),
        predictions: matrix.column(&matrix.predictions, h - 1),
        truths: matrix.column(&matrix.truths, h - 1),
    })
}

/// Aggregate and per-horizon metrics for one evaluation run.
///
/// Aggregates pool every (segment, horizon) pair; `corr` averages
/// per-horizon Pearson correlations. Per-horizon entries are `None` where a
/// metric was undefined (all points excluded, or zero variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mape_percent: f64,
    pub rmse: f64,
    pub corr: f64,
    pub per_horizon_mape: Vec<Option<f64>>,
    pub per_horizon_rmse: Vec<f64>,
    pub per_horizon_corr: Vec<Option<f64>>,
    /// Points dropped from MAPE because |truth| fell under the zero floor.
    pub mape_excluded_points: usize,
    /// Horizons dropped from CORR for zero variance.
    pub corr_excluded_horizons: usize,
    pub zero_floor: f64,
    pub segment_count: usize,
    pub horizon: usize,
}

/// Computes the full report over a forecast matrix.
pub fn evaluate(matrix: &ForecastMatrix, zero_floor: f64) -> EvalResult<EvalReport> {
    let (pred_flat, truth_flat) = matrix.flat();
    let mape_all = mape(&pred_flat, &truth_flat, zero_floor)?;
    let rmse_all = rmse(&pred_flat, &truth_flat)?;
    let corr_all = corr(&matrix.predictions, &matrix.truths)?;

    let mut per_horizon_mape = Vec::with_capacity(matrix.horizon);
    let mut per_horizon_rmse = Vec::with_capacity(matrix.horizon);
    for h in 0..matrix.horizon {
        let p = matrix.column(&matrix.predictions, h);
        let t = matrix.column(&matrix.truths, h);
        per_horizon_mape.push(mape(&p, &t, zero_floor).ok().map(|m| m.percent));
        per_horizon_rmse.push(rmse(&p, &t)?);
    }

    Ok(EvalReport {
        mape_percent: mape_all.percent,
        rmse: rmse_all,
        corr: corr_all.value,
        per_horizon_mape,
        per_horizon_rmse,
        per_horizon_corr: corr_all.per_horizon,
        mape_excluded_points: mape_all.excluded,
        corr_excluded_horizons: corr_all.excluded_horizons,
        zero_floor,
        segment_count: matrix.segment_count(),
        horizon: matrix.horizon,
    })
}

/// Writes the report as pretty JSON, atomically.
pub fn emit_report(report: &EvalReport, path: &Path) -> EvalResult<()> {
    atomic_write_json(path, report).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}
