use chrono::{Days, NaiveDate};

use super::frame::MultivariateFrame;
use super::series::VariableSpec;
use super::{DataError, DataResult};
use crate::nn::Tensor;

/// Where a segment set came from; augmented sets stay distinguishable from
/// raw training data and test sets are never augmented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Train,
    Test,
    Augmented,
}

/// One sliding-window sample: per-variable input matrices over the m days
/// ending at the anchor, and the next k days of the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Day index of the last input day within the source frame.
    pub t_index: usize,
    /// Per variable: channel_count × m.
    pub x: Vec<Tensor>,
    /// Target over days [t+1, t+k], length k.
    pub y: Tensor,
}

/// Ordered collection of segments cut from one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
    pub m: usize,
    pub k: usize,
    pub provenance: Provenance,
    pub specs: Vec<VariableSpec>,
    /// Date of day 0 of the source frame, anchoring every t_index.
    pub start_date: NaiveDate,
}

impl SegmentSet {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn date_at(&self, day_index: usize) -> NaiveDate {
        self.start_date + Days::new(day_index as u64)
    }

    /// Date of the first forecast day of a segment (anchor + 1).
    pub fn forecast_start_date(&self, segment: &Segment) -> NaiveDate {
        self.date_at(segment.t_index + 1)
    }
}

fn check_window(m: usize, k: usize) -> DataResult<()> {
    if m == 0 || k == 0 {
        return Err(DataError::Frame {
            detail: format!("window m={m} and horizon k={k} must both be >= 1"),
        });
    }
    Ok(())
}

/// Extracts the model inputs for the window ending at day `t` (inclusive):
/// one channels×m tensor per variable. Used for segment cutting and for
/// ad-hoc forecasts where no truth window exists.
pub fn input_window_at(
    frame: &MultivariateFrame,
    t: usize,
    m: usize,
) -> DataResult<Vec<Tensor>> {
    if m == 0 || t + 1 < m || t >= frame.len_days() {
        return Err(DataError::Frame {
            detail: format!(
                "input window of {m} days ending at day {t} does not fit a frame of {} days",
                frame.len_days()
            ),
        });
    }
    frame
        .variables()
        .iter()
        .map(|v| {
            let c = v.spec().channel_count;
            let mut data = vec![0.0; c * m];
            for ch in 0..c {
                for j in 0..m {
                    data[ch * m + j] = v.value(t + 1 - m + j, ch);
                }
            }
            Tensor::matrix(c, m, data)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| DataError::Frame {
            detail: format!("segment assembly failed: {e}"),
        })
}

fn segment_at(frame: &MultivariateFrame, t: usize, m: usize, k: usize) -> DataResult<Segment> {
    let x = input_window_at(frame, t, m)?;
    let y_data: Vec<f64> = (1..=k).map(|j| frame.variable(0).value(t + j, 0)).collect();
    let y = Tensor::vector(y_data).map_err(|e| DataError::Frame {
        detail: format!("segment assembly failed: {e}"),
    })?;
    Ok(Segment { t_index: t, x, y })
}

/// Cuts every full window from a frame by sliding one day at a time:
/// a frame of length L yields exactly L−m−k+1 segments.
pub fn make_segments(
    frame: &MultivariateFrame,
    m: usize,
    k: usize,
    provenance: Provenance,
) -> DataResult<SegmentSet> {
    check_window(m, k)?;
    let l = frame.len_days();
    if l < m + k {
        return Err(DataError::InsufficientData { length: l, m, k });
    }
    let segments = (0..l - m - k + 1)
        .map(|i| segment_at(frame, i + m - 1, m, k))
        .collect::<DataResult<Vec<_>>>()?;
    Ok(SegmentSet {
        segments,
        m,
        k,
        provenance,
        specs: frame.specs(),
        start_date: frame.start_date(),
    })
}

/// Cuts evaluation segments whose forecast windows lie entirely after the
/// boundary date. Input windows may reach back across the boundary, so the
/// frame passed here must cover both sides of the split.
pub fn make_eval_segments(
    frame: &MultivariateFrame,
    boundary: NaiveDate,
    m: usize,
    k: usize,
) -> DataResult<SegmentSet> {
    check_window(m, k)?;
    let Some(b) = frame.index_of(boundary) else {
        return Err(DataError::DateOutOfRange { date: boundary });
    };
    let l = frame.len_days();
    // Anchor t needs a full input window behind it (t ≥ m−1), a forecast
    // window ahead (t ≤ L−1−k) and forecasts after the boundary (t ≥ b).
    let t_min = b.max(m - 1);
    if l < k + 1 || t_min > l - 1 - k {
        return Err(DataError::InsufficientData { length: l, m, k });
    }
    let segments = (t_min..=l - 1 - k)
        .map(|t| segment_at(frame, t, m, k))
        .collect::<DataResult<Vec<_>>>()?;
    Ok(SegmentSet {
        segments,
        m,
        k,
        provenance: Provenance::Test,
        specs: frame.specs(),
        start_date: frame.start_date(),
    })
}
