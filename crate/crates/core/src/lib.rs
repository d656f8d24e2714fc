//! Forecasting toolkit for multivariate daily time series.
//!
//! The pipeline runs from raw daily series to forecast reports: calendar
//! dummy construction, sliding-window segmentation, multiplicative noise
//! augmentation, a multi-head convolutional model with additive attention,
//! Adam training and error reporting. Everything is deterministic for a
//! fixed set of seeds.

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod train;
pub(crate) mod util;
