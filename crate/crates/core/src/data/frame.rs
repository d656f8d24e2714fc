use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::io::{ingest_csv, write_csv};
use super::series::{RawSeries, VariableKind, VariableSpec};
use super::{DataError, DataResult};
use crate::util::atomic_write_json;

const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// One variable inside a frame: its spec plus a T×channel_count value matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameVariable {
    spec: VariableSpec,
    values: Vec<f64>,
}

impl FrameVariable {
    pub fn new(spec: VariableSpec, values: Vec<f64>) -> DataResult<Self> {
        spec.validate()?;
        if !values.len().is_multiple_of(spec.channel_count) {
            return Err(DataError::Variable {
                variable: spec.name.clone(),
                detail: format!(
                    "value count {} is not a multiple of channel count {}",
                    values.len(),
                    spec.channel_count
                ),
            });
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Variable {
                variable: spec.name.clone(),
                detail: format!("non-finite value {bad}"),
            });
        }
        Ok(Self { spec, values })
    }

    pub fn from_series(spec: VariableSpec, series: &RawSeries) -> DataResult<Self> {
        Self::new(spec, series.values().to_vec())
    }

    pub fn spec(&self) -> &VariableSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len_days(&self) -> usize {
        self.values.len() / self.spec.channel_count
    }

    pub fn day(&self, index: usize) -> &[f64] {
        let c = self.spec.channel_count;
        &self.values[index * c..(index + 1) * c]
    }

    pub fn value(&self, day: usize, channel: usize) -> f64 {
        self.values[day * self.spec.channel_count + channel]
    }

    fn slice_days(&self, from: usize, to: usize) -> Self {
        let c = self.spec.channel_count;
        Self {
            spec: self.spec.clone(),
            values: self.values[from * c..to * c].to_vec(),
        }
    }
}

/// Calendar-aligned collection of variables over the same run of days.
///
/// The first variable is always the forecast target: numeric, one channel.
/// The canonical five-variable layout is
/// [entrant, politics, disease, season, attraction] with channel counts
/// [1, 1, 1, 4, 1]; ablations may drop one non-target variable.
/// A zero-length frame can arise from a degenerate split; every operation
/// that needs data rejects it.
#[derive(Debug, Clone, PartialEq)]
pub struct MultivariateFrame {
    start_date: NaiveDate,
    length_days: usize,
    variables: Vec<FrameVariable>,
}

impl MultivariateFrame {
    pub fn new(start_date: NaiveDate, variables: Vec<FrameVariable>) -> DataResult<Self> {
        if variables.is_empty() {
            return Err(DataError::Frame {
                detail: "frame needs at least one variable".into(),
            });
        }
        let length_days = variables[0].len_days();
        for v in &variables {
            if v.len_days() != length_days {
                return Err(DataError::Frame {
                    detail: format!(
                        "variable '{}' covers {} days, expected {}",
                        v.spec().name,
                        v.len_days(),
                        length_days
                    ),
                });
            }
        }
        let target = &variables[0];
        if target.spec().kind != VariableKind::Numeric {
            return Err(DataError::Frame {
                detail: format!(
                    "first variable '{}' must be the numeric forecast target",
                    target.spec().name
                ),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &variables {
            if !seen.insert(v.spec().name.clone()) {
                return Err(DataError::Frame {
                    detail: format!("duplicate variable name '{}'", v.spec().name),
                });
            }
            validate_dummy_domain(v)?;
        }
        Ok(Self {
            start_date,
            length_days,
            variables,
        })
    }

    pub fn start_date(&self) -> NaiveDate {
        self.start_date
    }

    pub fn len_days(&self) -> usize {
        self.length_days
    }

    pub fn is_empty(&self) -> bool {
        self.length_days == 0
    }

    pub fn end_date(&self) -> Option<NaiveDate> {
        (self.length_days > 0).then(|| self.start_date + Days::new(self.length_days as u64 - 1))
    }

    pub fn variables(&self) -> &[FrameVariable] {
        &self.variables
    }

    pub fn variable(&self, index: usize) -> &FrameVariable {
        &self.variables[index]
    }

    pub fn variable_named(&self, name: &str) -> Option<&FrameVariable> {
        self.variables.iter().find(|v| v.spec().name == name)
    }

    pub fn specs(&self) -> Vec<VariableSpec> {
        self.variables.iter().map(|v| v.spec().clone()).collect()
    }

    pub fn date_at(&self, day: usize) -> NaiveDate {
        self.start_date + Days::new(day as u64)
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        match self.end_date() {
            Some(end) if date >= self.start_date && date <= end => {
                Some((date - self.start_date).num_days() as usize)
            }
            _ => None,
        }
    }

    /// Copy of this frame without the named variable, for drop-one ablations.
    /// The target (first variable) cannot be dropped.
    pub fn without_variable(&self, name: &str) -> DataResult<Self> {
        if self.variables[0].spec().name == name {
            return Err(DataError::Frame {
                detail: format!("cannot drop the forecast target '{name}'"),
            });
        }
        let kept: Vec<FrameVariable> = self
            .variables
            .iter()
            .filter(|v| v.spec().name != name)
            .cloned()
            .collect();
        if kept.len() == self.variables.len() {
            return Err(DataError::Frame {
                detail: format!("no variable named '{name}' to drop"),
            });
        }
        Self::new(self.start_date, kept)
    }

    /// Replaces every variable's values through a per-variable mapping,
    /// preserving specs and calendar. Used by the scaler.
    pub(crate) fn map_values<F>(&self, mut f: F) -> DataResult<Self>
    where
        F: FnMut(usize, &FrameVariable) -> Vec<f64>,
    {
        let variables = self
            .variables
            .iter()
            .enumerate()
            .map(|(i, v)| FrameVariable::new(v.spec().clone(), f(i, v)))
            .collect::<DataResult<Vec<_>>>()?;
        Self::new(self.start_date, variables)
    }

    /// Persists the frame as a directory: one CSV per variable plus a JSON
    /// manifest carrying the variable order, kinds and calendar.
    pub fn save(&self, dir: &Path) -> DataResult<()> {
        let io_err = |source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(io_err)?;
        let mut entries = Vec::new();
        for v in &self.variables {
            let file = format!("{}.csv", v.spec().name);
            write_csv(
                &dir.join(&file),
                &v.spec().name,
                self.start_date,
                v.spec().channel_count,
                v.values(),
            )?;
            entries.push(ManifestVariable {
                spec: v.spec().clone(),
                file,
            });
        }
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            start_date: self.start_date,
            length_days: self.length_days,
            variables: entries,
        };
        atomic_write_json(&dir.join(MANIFEST_FILE), &manifest).map_err(io_err)
    }

    pub fn load(dir: &Path) -> DataResult<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&manifest_path).map_err(|source| DataError::Io {
            path: manifest_path.clone(),
            source,
        })?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|source| DataError::Json {
                path: manifest_path.clone(),
                source,
            })?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(DataError::Frame {
                detail: format!(
                    "unsupported manifest format_version {} (expected {MANIFEST_VERSION})",
                    manifest.format_version
                ),
            });
        }
        let mut variables = Vec::new();
        for entry in &manifest.variables {
            let series = ingest_csv(&dir.join(&entry.file), &entry.spec)?;
            if series.start_date() != manifest.start_date || series.len_days() != manifest.length_days
            {
                return Err(DataError::Frame {
                    detail: format!(
                        "variable '{}' covers {}..{} ({} days), manifest declares start {} and {} days",
                        entry.spec.name,
                        series.start_date(),
                        series.end_date(),
                        series.len_days(),
                        manifest.start_date,
                        manifest.length_days
                    ),
                });
            }
            variables.push(FrameVariable::from_series(entry.spec.clone(), &series)?);
        }
        Self::new(manifest.start_date, variables)
    }
}

fn validate_dummy_domain(v: &FrameVariable) -> DataResult<()> {
    if !v.spec().is_dummy() {
        return Ok(());
    }
    let fail = |detail: String| {
        Err(DataError::Variable {
            variable: v.spec().name.clone(),
            detail,
        })
    };
    if v.values().iter().any(|x| *x != 0.0 && *x != 1.0) {
        return fail("dummy values must be 0 or 1".into());
    }
    if v.spec().kind == VariableKind::DummySeason {
        for d in 0..v.len_days() {
            if v.day(d).iter().sum::<f64>() != 1.0 {
                return fail(format!("season row {d} is not one-hot"));
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    start_date: NaiveDate,
    length_days: usize,
    variables: Vec<ManifestVariable>,
}

#[derive(Serialize, Deserialize)]
struct ManifestVariable {
    spec: VariableSpec,
    file: String,
}

/// Canonical column layout: [entrant, politics, disease, season, attraction]
/// with channel counts [1, 1, 1, 4, 1].
const CANONICAL_LAYOUT: [(VariableKind, usize); 5] = [
    (VariableKind::Numeric, 1),
    (VariableKind::DummyInterval, 1),
    (VariableKind::DummyInterval, 1),
    (VariableKind::DummySeason, 4),
    (VariableKind::Numeric, 1),
];

/// Aligns the canonical five variables on a shared calendar range
/// [`start`, `end`] (inclusive) and builds a frame.
pub fn assemble_frame(
    series: &[(VariableSpec, RawSeries)],
    start: NaiveDate,
    end: NaiveDate,
) -> DataResult<MultivariateFrame> {
    if end < start {
        return Err(DataError::Frame {
            detail: format!("range ends ({end}) before it starts ({start})"),
        });
    }
    if series.len() != CANONICAL_LAYOUT.len() {
        return Err(DataError::Frame {
            detail: format!(
                "expected {} variables in canonical order, got {}",
                CANONICAL_LAYOUT.len(),
                series.len()
            ),
        });
    }
    let mut variables = Vec::new();
    for ((spec, raw), (kind, channels)) in series.iter().zip(CANONICAL_LAYOUT) {
        if spec.kind != kind || spec.channel_count != channels {
            return Err(DataError::Frame {
                detail: format!(
                    "variable '{}' has kind {:?} with {} channels, expected {:?} with {}",
                    spec.name, spec.kind, spec.channel_count, kind, channels
                ),
            });
        }
        let Some(from) = raw.day_index(start) else {
            return Err(DataError::Coverage {
                series: spec.name.clone(),
                date: start,
            });
        };
        let Some(to) = raw.day_index(end) else {
            return Err(DataError::Coverage {
                series: spec.name.clone(),
                date: end,
            });
        };
        let c = spec.channel_count;
        let values = raw.values()[from * c..(to + 1) * c].to_vec();
        variables.push(FrameVariable::new(spec.clone(), values)?);
    }
    MultivariateFrame::new(start, variables)
}

/// Splits a frame at a boundary date: train covers days ≤ boundary, test the
/// days after it. A boundary on the last day yields an empty test frame.
pub fn split_train_test(
    frame: &MultivariateFrame,
    boundary: NaiveDate,
) -> DataResult<(MultivariateFrame, MultivariateFrame)> {
    let Some(idx) = frame.index_of(boundary) else {
        return Err(DataError::DateOutOfRange { date: boundary });
    };
    let train_len = idx + 1;
    let train = MultivariateFrame {
        start_date: frame.start_date,
        length_days: train_len,
        variables: frame
            .variables
            .iter()
            .map(|v| v.slice_days(0, train_len))
            .collect(),
    };
    let test_len = frame.length_days - train_len;
    if test_len == 0 {
        log::warn!("split at {boundary} leaves an empty test range");
    }
    let test = MultivariateFrame {
        start_date: frame.start_date + Days::new(train_len as u64),
        length_days: test_len,
        variables: frame
            .variables
            .iter()
            .map(|v| v.slice_days(train_len, frame.length_days))
            .collect(),
    };
    Ok((train, test))
}
