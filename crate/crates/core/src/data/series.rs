use chrono::{Datelike, Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{DataError, DataResult};

/// How a variable's values are produced and whether they may be scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariableKind {
    /// Real-valued daily measurements; standardized by the scaler.
    Numeric,
    /// 0/1 indicator active inside declared date intervals; never scaled.
    DummyInterval,
    /// 4-channel one-hot season encoding; never scaled.
    DummySeason,
}

/// Closed date interval (both endpoints inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateInterval {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateInterval {
    pub fn new(start: NaiveDate, end: NaiveDate) -> DataResult<Self> {
        if end < start {
            return Err(DataError::Variable {
                variable: String::new(),
                detail: format!("interval ends ({end}) before it starts ({start})"),
            });
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }
}

/// Declares one input variable: its name, how values arise and how many
/// channels it spans per day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default)]
    pub intervals: Vec<DateInterval>,
    pub channel_count: usize,
}

impl VariableSpec {
    pub fn numeric(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: VariableKind::Numeric,
            intervals: Vec::new(),
            channel_count: 1,
        }
    }

    pub fn dummy_interval(name: &str, intervals: Vec<DateInterval>) -> DataResult<Self> {
        let spec = Self {
            name: name.to_string(),
            kind: VariableKind::DummyInterval,
            intervals,
            channel_count: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dummy_season(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: VariableKind::DummySeason,
            intervals: Vec::new(),
            channel_count: 4,
        }
    }

    pub fn is_dummy(&self) -> bool {
        matches!(self.kind, VariableKind::DummyInterval | VariableKind::DummySeason)
    }

    pub fn validate(&self) -> DataResult<()> {
        let fail = |detail: String| {
            Err(DataError::Variable {
                variable: self.name.clone(),
                detail,
            })
        };
        if self.name.is_empty() {
            return fail("name must not be empty".into());
        }
        if self.channel_count == 0 {
            return fail("channel count must be >= 1".into());
        }
        match self.kind {
            VariableKind::Numeric | VariableKind::DummyInterval => {
                if self.channel_count != 1 {
                    return fail(format!(
                        "kind {:?} is single-channel, got {}",
                        self.kind, self.channel_count
                    ));
                }
            }
            VariableKind::DummySeason => {
                if self.channel_count != 4 {
                    return fail(format!("season dummy has 4 channels, got {}", self.channel_count));
                }
            }
        }
        if self.kind != VariableKind::DummyInterval && !self.intervals.is_empty() {
            return fail("intervals are only meaningful for interval dummies".into());
        }
        let mut sorted = self.intervals.clone();
        sorted.sort_by_key(|iv| iv.start);
        for pair in sorted.windows(2) {
            if pair[1].start <= pair[0].end {
                return fail(format!(
                    "intervals overlap: {}..={} and {}..={}",
                    pair[0].start, pair[0].end, pair[1].start, pair[1].end
                ));
            }
        }
        for iv in &sorted {
            if iv.end < iv.start {
                return fail(format!("interval ends ({}) before it starts ({})", iv.end, iv.start));
            }
        }
        Ok(())
    }
}

/// One variable's values over a contiguous run of days, one row per day.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    name: String,
    channel_count: usize,
    start_date: NaiveDate,
    values: Vec<f64>,
}

impl RawSeries {
    /// `values` is row-major with `channel_count` columns, one row per
    /// consecutive day starting at `start_date`.
    pub fn new(
        name: &str,
        channel_count: usize,
        start_date: NaiveDate,
        values: Vec<f64>,
    ) -> DataResult<Self> {
        let fail = |detail: String| {
            Err(DataError::Variable {
                variable: name.to_string(),
                detail,
            })
        };
        if channel_count == 0 {
            return fail("channel count must be >= 1".into());
        }
        if values.is_empty() {
            return fail("series must cover at least one day".into());
        }
        if !values.len().is_multiple_of(channel_count) {
            return fail(format!(
                "value count {} is not a multiple of channel count {}",
                values.len(),
                channel_count
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return fail(format!("non-finite value {bad}"));
        }
        Ok(Self {
            name: name.to_string(),
            channel_count,
            start_date,
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channel_count(&self) -> usize {
        self.channel_count
    }

    pub fn start_date(&self) -> NaiveDate {
        self.start_date
    }

    pub fn len_days(&self) -> usize {
        self.values.len() / self.channel_count
    }

    pub fn end_date(&self) -> NaiveDate {
        self.start_date + Days::new(self.len_days() as u64 - 1)
    }

    pub fn day(&self, index: usize) -> &[f64] {
        &self.values[index * self.channel_count..(index + 1) * self.channel_count]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        if date < self.start_date || date > self.end_date() {
            return None;
        }
        Some((date - self.start_date).num_days() as usize)
    }
}

/// Season channel for a date: 0 spring (Mar..=May), 1 summer (Jun..=Aug),
/// 2 autumn (Sep..=Nov), 3 winter (Dec..=Feb).
pub fn season_channel(date: NaiveDate) -> usize {
    match date.month() {
        3..=5 => 0,
        6..=8 => 1,
        9..=11 => 2,
        _ => 3,
    }
}

/// Builds the 0/1 indicator series for an interval dummy over
/// [`start_date`, `start_date + t_days`).
pub fn build_interval_dummy(
    spec: &VariableSpec,
    start_date: NaiveDate,
    t_days: usize,
) -> DataResult<RawSeries> {
    if spec.kind != VariableKind::DummyInterval {
        return Err(DataError::Variable {
            variable: spec.name.clone(),
            detail: format!("expected an interval dummy, got {:?}", spec.kind),
        });
    }
    spec.validate()?;
    if t_days == 0 {
        return Err(DataError::Variable {
            variable: spec.name.clone(),
            detail: "series must cover at least one day".into(),
        });
    }
    let end_date = start_date + Days::new(t_days as u64 - 1);
    for iv in &spec.intervals {
        if iv.start < start_date || iv.end > end_date {
            return Err(DataError::Variable {
                variable: spec.name.clone(),
                detail: format!(
                    "interval {}..={} is outside the dataset range {}..={}",
                    iv.start, iv.end, start_date, end_date
                ),
            });
        }
    }
    let values = (0..t_days)
        .map(|d| {
            let date = start_date + Days::new(d as u64);
            if spec.intervals.iter().any(|iv| iv.contains(date)) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    RawSeries::new(&spec.name, 1, start_date, values)
}

/// Builds the 4-channel one-hot season series over
/// [`start_date`, `start_date + t_days`).
pub fn build_season_dummy(start_date: NaiveDate, t_days: usize) -> DataResult<RawSeries> {
    let mut values = vec![0.0; t_days * 4];
    for d in 0..t_days {
        let date = start_date + Days::new(d as u64);
        values[d * 4 + season_channel(date)] = 1.0;
    }
    RawSeries::new("season", 4, start_date, values)
}
