use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::frame::MultivariateFrame;
use super::{DataError, DataResult};

/// Mean and standard deviation of one channel over the fit range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VariableScaling {
    name: String,
    /// One entry per channel for numeric variables; None leaves the variable
    /// untouched (dummies).
    channels: Option<Vec<ChannelStats>>,
}

/// Z-score standardization fitted on the training date range only.
///
/// Numeric variables are shifted to mean 0 / std 1 per channel; dummy
/// variables pass through unchanged. Applying then inverting restores the
/// original values within 1e-9 relative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    variables: Vec<VariableScaling>,
}

impl Scaler {
    /// Fits per-channel statistics on days up to and including
    /// `train_end_date`. Days after the boundary are never read.
    pub fn fit(frame: &MultivariateFrame, train_end_date: NaiveDate) -> DataResult<Self> {
        let Some(end_idx) = frame.index_of(train_end_date) else {
            return Err(DataError::DateOutOfRange {
                date: train_end_date,
            });
        };
        let fit_days = end_idx + 1;
        let mut variables = Vec::new();
        for v in frame.variables() {
            let channels = if v.spec().is_dummy() {
                None
            } else {
                let c = v.spec().channel_count;
                let mut stats = Vec::with_capacity(c);
                for ch in 0..c {
                    let mut mean = 0.0;
                    for d in 0..fit_days {
                        mean += v.value(d, ch);
                    }
                    mean /= fit_days as f64;
                    let mut var = 0.0;
                    for d in 0..fit_days {
                        let diff = v.value(d, ch) - mean;
                        var += diff * diff;
                    }
                    var /= fit_days as f64;
                    let std = var.sqrt();
                    if std == 0.0 {
                        return Err(DataError::ZeroVariance {
                            variable: v.spec().name.clone(),
                        });
                    }
                    stats.push(ChannelStats { mean, std });
                }
                Some(stats)
            };
            variables.push(VariableScaling {
                name: v.spec().name.clone(),
                channels,
            });
        }
        Ok(Self { variables })
    }

    fn check_frame(&self, frame: &MultivariateFrame) -> DataResult<()> {
        if frame.variables().len() != self.variables.len() {
            return Err(DataError::Frame {
                detail: format!(
                    "scaler covers {} variables, frame has {}",
                    self.variables.len(),
                    frame.variables().len()
                ),
            });
        }
        for (v, s) in frame.variables().iter().zip(&self.variables) {
            if v.spec().name != s.name {
                return Err(DataError::Frame {
                    detail: format!(
                        "scaler variable '{}' does not match frame variable '{}'",
                        s.name,
                        v.spec().name
                    ),
                });
            }
            if let Some(stats) = &s.channels {
                if stats.len() != v.spec().channel_count {
                    return Err(DataError::Frame {
                        detail: format!(
                            "scaler for '{}' has {} channels, frame has {}",
                            s.name,
                            stats.len(),
                            v.spec().channel_count
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// Standardizes numeric variables; dummies are copied through.
    pub fn apply(&self, frame: &MultivariateFrame) -> DataResult<MultivariateFrame> {
        self.check_frame(frame)?;
        frame.map_values(|i, v| match &self.variables[i].channels {
            None => v.values().to_vec(),
            Some(stats) => {
                let c = v.spec().channel_count;
                v.values()
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let s = &stats[j % c];
                        (x - s.mean) / s.std
                    })
                    .collect()
            }
        })
    }

    /// Undoes [`Scaler::apply`], restoring original units.
    pub fn invert(&self, frame: &MultivariateFrame) -> DataResult<MultivariateFrame> {
        self.check_frame(frame)?;
        frame.map_values(|i, v| match &self.variables[i].channels {
            None => v.values().to_vec(),
            Some(stats) => {
                let c = v.spec().channel_count;
                v.values()
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let s = &stats[j % c];
                        x * s.std + s.mean
                    })
                    .collect()
            }
        })
    }

    /// Statistics of the forecast target (variable 0, channel 0).
    pub fn target_stats(&self) -> DataResult<&ChannelStats> {
        self.variables
            .first()
            .and_then(|v| v.channels.as_ref())
            .and_then(|c| c.first())
            .ok_or_else(|| DataError::Frame {
                detail: "scaler has no statistics for the target variable".into(),
            })
    }

    /// Maps target values from original units into scaled space.
    pub fn scale_target(&self, values: &[f64]) -> DataResult<Vec<f64>> {
        let s = self.target_stats()?;
        Ok(values.iter().map(|x| (x - s.mean) / s.std).collect())
    }

    /// Maps target values from scaled space back to original units.
    pub fn invert_target(&self, values: &[f64]) -> DataResult<Vec<f64>> {
        let s = self.target_stats()?;
        Ok(values.iter().map(|x| x * s.std + s.mean).collect())
    }
}
