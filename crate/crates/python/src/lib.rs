//! Python bindings for the forecasting toolkit: synthetic data, training,
//! evaluation, forecasting, and the raw accuracy metrics.
//!
//! The module keeps the boundary thin: configs come in as JSON strings or
//! plain Python dicts matching the run-config schema, and structured results
//! go back out as ordinary dicts and lists. Heavy state (frames, trained
//! checkpoints) stays in Rust behind small wrapper classes.

use std::path::PathBuf;

use chrono::NaiveDate;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyAny, PyModule, PyString};

use mhac_core::config::RunConfig;
use mhac_core::data::{synth_generate, MultivariateFrame, SynthSpec};
use mhac_core::eval::{self, ForecastMatrix};
use mhac_core::pipeline;
use mhac_core::train;

/// Formats an error with its full cause chain on one line.
fn chain_text(err: &dyn std::error::Error) -> String {
    let mut text = err.to_string();
    let mut source = err.source();
    while let Some(cause) = source {
        text.push_str(": ");
        text.push_str(&cause.to_string());
        source = cause.source();
    }
    text
}

fn value_error(err: impl std::error::Error) -> PyErr {
    PyValueError::new_err(chain_text(&err))
}

fn io_error(err: impl std::error::Error) -> PyErr {
    PyIOError::new_err(chain_text(&err))
}

/// Converts any serializable Rust value into Python objects via the JSON
/// data model (dicts, lists, str, float, int, bool, None).
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Accepts a run config as a JSON string or a Python mapping and validates
/// it before any work happens.
fn config_from(obj: &Bound<'_, PyAny>) -> PyResult<RunConfig> {
    let text: String = if let Ok(s) = obj.cast::<PyString>() {
        s.to_string()
    } else {
        obj.py()
            .import("json")?
            .call_method1("dumps", (obj,))?
            .extract()?
    };
    let config: RunConfig = serde_json::from_str(&text).map_err(value_error)?;
    config.validate().map_err(value_error)?;
    Ok(config)
}

fn parse_date(text: &str) -> PyResult<NaiveDate> {
    text.parse()
        .map_err(|_| PyValueError::new_err(format!("expected YYYY-MM-DD date, got '{text}'")))
}

/// A daily multivariate series: one calendar, several named variables, each
/// with one or more channels (dummies expand to one channel per category).
#[pyclass(frozen)]
struct Frame {
    inner: MultivariateFrame,
}

#[pymethods]
impl Frame {
    /// Generates a synthetic frame. `spec` is a synth-spec dict or JSON
    /// string; omit it for the default ten-year setup.
    #[staticmethod]
    #[pyo3(signature = (spec=None))]
    fn synth(spec: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let spec: SynthSpec = match spec {
            None => SynthSpec::default(),
            Some(obj) => {
                let text: String = if let Ok(s) = obj.cast::<PyString>() {
                    s.to_string()
                } else {
                    obj.py()
                        .import("json")?
                        .call_method1("dumps", (obj,))?
                        .extract()?
                };
                serde_json::from_str(&text).map_err(value_error)?
            }
        };
        Ok(Self {
            inner: synth_generate(&spec).map_err(value_error)?,
        })
    }

    /// Loads a dataset directory (per-variable CSVs plus manifest.json).
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: MultivariateFrame::load(&dir).map_err(io_error)?,
        })
    }

    /// Writes the frame as a dataset directory; refuses a non-empty
    /// directory unless `force` is set.
    #[pyo3(signature = (dir, force=false))]
    fn save(&self, dir: PathBuf, force: bool) -> PyResult<()> {
        pipeline::write_dataset(&self.inner, &dir, force).map_err(io_error)?;
        Ok(())
    }

    #[getter]
    fn start_date(&self) -> String {
        self.inner.start_date().to_string()
    }

    #[getter]
    fn end_date(&self) -> Option<String> {
        self.inner.end_date().map(|d| d.to_string())
    }

    #[getter]
    fn variable_names(&self) -> Vec<String> {
        self.inner
            .variables()
            .iter()
            .map(|v| v.spec().name.clone())
            .collect()
    }

    /// Channel values of one variable as a day-major list of rows.
    fn values(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let variable = self
            .inner
            .variable_named(name)
            .ok_or_else(|| PyValueError::new_err(format!("no variable named '{name}'")))?;
        Ok((0..variable.len_days())
            .map(|day| variable.day(day).to_vec())
            .collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len_days()
    }

    fn __repr__(&self) -> String {
        format!(
            "Frame({} days x {} variables from {})",
            self.inner.len_days(),
            self.inner.variables().len(),
            self.inner.start_date()
        )
    }
}

/// A trained model: parameters, scaler, and the config echo, loadable from
/// and savable to checkpoint.json files.
#[pyclass(frozen)]
struct Checkpoint {
    inner: train::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: train::Checkpoint::load(&path).map_err(io_error)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(io_error)
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch
    }

    /// The model architecture as a dict.
    #[getter]
    fn model_config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.model_config)
    }

    /// The full run config this checkpoint was trained under, if recorded.
    #[getter]
    fn config_echo<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config_echo)
    }

    fn __repr__(&self) -> String {
        format!(
            "Checkpoint(m={}, k={}, best_epoch={})",
            self.inner.model_config.input_window,
            self.inner.model_config.horizon,
            self.inner.best_epoch
        )
    }
}

/// The default run config as a dict: edit fields and pass the result to
/// `train`, `evaluate`, `experiment`, or `forecast`.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &RunConfig::default())
}

/// Runs the full training pipeline (load/synthesize, split, scale, segment,
/// augment, train) and returns `(checkpoint, history)` where history is a
/// list of per-epoch dicts.
#[pyfunction]
fn train_model<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
) -> PyResult<(Checkpoint, Bound<'py, PyAny>)> {
    let config = config_from(config)?;
    let artifacts = pipeline::run_training(&config).map_err(value_error)?;
    let history = to_py(py, &artifacts.history.records)?;
    Ok((
        Checkpoint {
            inner: artifacts.checkpoint,
        },
        history,
    ))
}

/// Scores a checkpoint on the config's test range. Returns a dict with the
/// metric report under "report" and the aligned original-units forecast
/// matrix under "matrix".
#[pyfunction]
fn evaluate_model<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    checkpoint: &Checkpoint,
) -> PyResult<Bound<'py, PyAny>> {
    let config = config_from(config)?;
    let evaluation = pipeline::evaluate_checkpoint(&config, &checkpoint.inner).map_err(value_error)?;
    to_py(py, &evaluation)
}

/// Trains and evaluates `repeat_count` runs with consecutive seeds, writing
/// per-run artifacts plus mean_report.json under `out_dir`, and returns the
/// experiment report as a dict.
#[pyfunction]
fn experiment<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    out_dir: PathBuf,
) -> PyResult<Bound<'py, PyAny>> {
    let config = config_from(config)?;
    let report = pipeline::run_experiment(&config, &out_dir).map_err(value_error)?;
    to_py(py, &report)
}

/// Predicts the k days directly after `as_of` (YYYY-MM-DD) in original
/// units; returns a list of {"date", "value"} dicts.
#[pyfunction]
fn forecast<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    checkpoint: &Checkpoint,
    as_of: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let config = config_from(config)?;
    let as_of = parse_date(as_of)?;
    let series = pipeline::forecast(&config, &checkpoint.inner, as_of).map_err(value_error)?;
    to_py(py, &series.points)
}

/// Mean absolute percentage error over aligned points, excluding truths
/// under `zero_floor`; returns `(percent, excluded_points)`.
#[pyfunction]
#[pyo3(signature = (pred, truth, zero_floor=eval::DEFAULT_ZERO_FLOOR))]
fn mape(pred: Vec<f64>, truth: Vec<f64>, zero_floor: f64) -> PyResult<(f64, usize)> {
    let outcome = eval::mape(&pred, &truth, zero_floor).map_err(value_error)?;
    Ok((outcome.percent, outcome.excluded))
}

/// Root mean squared error over aligned points.
#[pyfunction]
fn rmse(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    eval::rmse(&pred, &truth).map_err(value_error)
}

/// Horizon-averaged Pearson correlation over row-aligned matrices; returns
/// `(value, excluded_horizons)`.
#[pyfunction]
fn corr(pred_rows: Vec<Vec<f64>>, truth_rows: Vec<Vec<f64>>) -> PyResult<(f64, usize)> {
    let outcome = eval::corr(&pred_rows, &truth_rows).map_err(value_error)?;
    Ok((outcome.value, outcome.excluded_horizons))
}

/// Full metric report (MAPE/RMSE/CORR plus per-horizon breakdowns) over a
/// prediction/truth matrix whose rows start on consecutive days from
/// `start_date`.
#[pyfunction]
#[pyo3(signature = (pred_rows, truth_rows, start_date, zero_floor=eval::DEFAULT_ZERO_FLOOR))]
fn evaluate_matrix<'py>(
    py: Python<'py>,
    pred_rows: Vec<Vec<f64>>,
    truth_rows: Vec<Vec<f64>>,
    start_date: &str,
    zero_floor: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let start = parse_date(start_date)?;
    let horizon = pred_rows.first().map_or(0, Vec::len);
    let dates = (0..pred_rows.len() as u64)
        .map(|i| start + chrono::Days::new(i))
        .collect();
    let matrix = ForecastMatrix::new(pred_rows, truth_rows, dates, horizon).map_err(value_error)?;
    let report = eval::evaluate(&matrix, zero_floor).map_err(value_error)?;
    to_py(py, &report)
}

#[pymodule]
fn mhac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Frame>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_model, m)?)?;
    m.add_function(wrap_pyfunction!(experiment, m)?)?;
    m.add_function(wrap_pyfunction!(forecast, m)?)?;
    m.add_function(wrap_pyfunction!(mape, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(corr, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_matrix, m)?)?;
    Ok(())
}
