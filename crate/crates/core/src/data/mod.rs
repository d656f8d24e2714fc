//! Data layer: raw daily series, calendar dummy covariates, frame assembly,
//! train/test splitting, scaling, sliding-window segmentation and synthetic
//! dataset generation.
//!
//! All operations are pure functions of their inputs; values are immutable
//! after construction and safe to share across threads.

mod frame;
mod io;
mod scaler;
mod segment;
mod series;
mod synth;

pub use frame::{assemble_frame, split_train_test, FrameVariable, MultivariateFrame};
pub use io::{ingest_csv, write_csv};
pub use scaler::{ChannelStats, Scaler};
pub use segment::{
    input_window_at, make_eval_segments, make_segments, Provenance, Segment, SegmentSet,
};
pub use series::{
    build_interval_dummy, build_season_dummy, season_channel, DateInterval, RawSeries,
    VariableKind, VariableSpec,
};
pub use synth::{synth_generate, ShockSpec, SynthSpec};

use chrono::NaiveDate;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: file has no data rows")]
    EmptyFile { path: PathBuf },
    #[error("{path}: row {row}: {detail}")]
    Parse {
        path: PathBuf,
        row: usize,
        detail: String,
    },
    #[error("series '{series}': missing day {date}")]
    Gap { series: String, date: NaiveDate },
    #[error("series '{series}' does not cover {date}")]
    Coverage { series: String, date: NaiveDate },
    #[error("variable '{variable}': {detail}")]
    Variable { variable: String, detail: String },
    #[error("frame: {detail}")]
    Frame { detail: String },
    #[error("variable '{variable}' is constant over the scaler fit range")]
    ZeroVariance { variable: String },
    #[error("frame length {length} cannot fit an input window of {m} days plus a horizon of {k} days")]
    InsufficientData { length: usize, m: usize, k: usize },
    #[error("date {date} is outside the frame range")]
    DateOutOfRange { date: NaiveDate },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub type DataResult<T> = Result<T, DataError>;
