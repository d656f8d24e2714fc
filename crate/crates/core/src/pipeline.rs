//! End-to-end orchestration: data loading, the split→scale→segment→augment→
//! train chain, checkpoint evaluation, repeated experiments, and ad-hoc
//! forecasts. Commands in the CLI are thin wrappers over these functions.

use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_set, AugmentError, NoiseModel};
use crate::config::{DataSource, RunConfig};
use crate::data::{
    input_window_at, make_eval_segments, make_segments, split_train_test, synth_generate,
    DataError, MultivariateFrame, Provenance, Segment,
};
use crate::eval::{
    emit_plot, evaluate, horizon_series, EvalError, EvalReport, ForecastMatrix,
};
use crate::model::{predict, predict_batch, MhacConfig, ModelError};
use crate::nn::Tensor;
use crate::train::{
    split_validation, train, Checkpoint, TrainError, TrainHistory,
};
use crate::util::atomic_write_json;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("augment: {0}")]
    Augment(#[from] AugmentError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("train: {0}")]
    Train(#[from] TrainError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("pipeline: {0}")]
    Setup(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type PipelineResult<T> = Result<T, PipelineError>;

fn io_err(context: &str) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        context: context.to_string(),
        source,
    }
}

/// Generates the synthetic frame named by the config's data source.
pub fn synthesize(config: &RunConfig) -> PipelineResult<MultivariateFrame> {
    match &config.data {
        DataSource::Synth { spec } => Ok(synth_generate(spec)?),
        DataSource::CsvDir { .. } => Err(PipelineError::Setup(
            "data source is a csv directory; synthesis needs a synth spec".into(),
        )),
    }
}

/// Loads the configured frame, applies any variable drops, and returns it
/// with the matching (possibly head-reduced) model config.
pub fn load_frame(config: &RunConfig) -> PipelineResult<(MultivariateFrame, MhacConfig)> {
    let mut frame = match &config.data {
        DataSource::Synth { spec } => synth_generate(spec)?,
        DataSource::CsvDir { path } => MultivariateFrame::load(path)?,
    };
    let mut model = config.model.clone();
    for name in &config.drop_variables {
        let index = frame
            .variables()
            .iter()
            .position(|v| v.spec().name == *name)
            .ok_or_else(|| {
                PipelineError::Setup(format!("cannot drop unknown variable '{name}'"))
            })?;
        frame = frame.without_variable(name)?;
        if index < model.head_channels.len() {
            model.head_channels.remove(index);
            model.kernel_sizes.remove(index);
        }
    }
    model.validate()?;
    let frame_channels: Vec<usize> = frame
        .variables()
        .iter()
        .map(|v| v.spec().channel_count)
        .collect();
    if frame_channels != model.head_channels {
        return Err(PipelineError::Setup(format!(
            "frame channels {frame_channels:?} do not match model head channels {:?}",
            model.head_channels
        )));
    }
    Ok((frame, model))
}

/// Everything one training run produces in memory.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

/// Runs the full training pipeline with the config's seeds: boundary split,
/// scaling fitted on the training range only, segmentation, validation
/// split, augmentation of the training side, optimization.
pub fn run_training(config: &RunConfig) -> PipelineResult<TrainArtifacts> {
    let (frame, model) = load_frame(config)?;
    let (train_frame, _test_frame) = split_train_test(&frame, config.train_test_boundary)?;
    let scaler = crate::data::Scaler::fit(&train_frame, config.train_test_boundary)?;
    let scaled = scaler.apply(&train_frame)?;
    let segments = make_segments(
        &scaled,
        model.input_window,
        model.horizon,
        Provenance::Train,
    )?;
    let (train_split, val_split) = split_validation(
        &segments,
        config.train.validation_fraction,
        config.train.seed,
        config.train.chronological_split,
    )?;
    let noise = NoiseModel::fit(&train_split, config.noise_sigma_scale, config.augment_seed)?;
    let augmented = augment_set(&train_split, config.augment_factor, &noise)?;
    log::info!(
        "training on {} segments ({} original + {} augmented), validating on {}",
        augmented.len(),
        train_split.len(),
        augmented.len() - train_split.len(),
        val_split.len()
    );
    let outcome = train(&model, &config.train, &augmented, &val_split)?;
    let mut checkpoint = Checkpoint::new(model, config.train.clone(), Some(scaler), &outcome);
    checkpoint.config_echo = Some(
        serde_json::to_value(config)
            .map_err(|e| PipelineError::Setup(format!("config echo: {e}")))?,
    );
    Ok(TrainArtifacts {
        checkpoint,
        history: outcome.history,
    })
}

/// Writes checkpoint.json, scaler.json, and history.jsonl into `dir`.
pub fn write_train_artifacts(artifacts: &TrainArtifacts, dir: &Path) -> PipelineResult<()> {
    std::fs::create_dir_all(dir).map_err(io_err(&format!("creating {}", dir.display())))?;
    artifacts.checkpoint.save(&dir.join("checkpoint.json"))?;
    let scaler = artifacts.checkpoint.scaler.as_ref().ok_or_else(|| {
        PipelineError::Setup("training produced no scaler".into())
    })?;
    atomic_write_json(&dir.join("scaler.json"), scaler)
        .map_err(io_err("writing scaler.json"))?;
    artifacts.history.write_jsonl(&dir.join("history.jsonl"))?;
    Ok(())
}

/// Evaluation-time pairing of report and the matrix behind it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub matrix: ForecastMatrix,
}

/// A report together with the exact configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub config: RunConfig,
    pub metrics: EvalReport,
}

fn checkpoint_scaler(checkpoint: &Checkpoint) -> PipelineResult<&crate::data::Scaler> {
    checkpoint.scaler.as_ref().ok_or_else(|| {
        PipelineError::Setup("checkpoint carries no scaler; retrain to evaluate".into())
    })
}

/// Scores a trained checkpoint on the config's test range: forecasts every
/// anchor after the boundary with the final-epoch parameters and computes
/// the metric report in original units.
pub fn evaluate_checkpoint(
    config: &RunConfig,
    checkpoint: &Checkpoint,
) -> PipelineResult<Evaluation> {
    let (frame, model) = load_frame(config)?;
    if checkpoint.model_config != model {
        return Err(PipelineError::Setup(
            "checkpoint model config does not match the run config".into(),
        ));
    }
    let scaler = checkpoint_scaler(checkpoint)?;
    let params = checkpoint.final_params()?;
    let scaled = scaler.apply(&frame)?;
    let eval_set = make_eval_segments(
        &scaled,
        config.train_test_boundary,
        model.input_window,
        model.horizon,
    )?;
    let predictions = predict_batch(&model, &params, &eval_set)?;
    let matrix = ForecastMatrix::from_scaled(&eval_set, &predictions, scaler)?;
    let report = evaluate(&matrix, config.zero_floor)?;
    Ok(Evaluation { report, matrix })
}

/// Writes report.json (config echo + metrics) and the horizon plot.
pub fn write_eval_artifacts(
    config: &RunConfig,
    evaluation: &Evaluation,
    dir: &Path,
) -> PipelineResult<()> {
    std::fs::create_dir_all(dir).map_err(io_err(&format!("creating {}", dir.display())))?;
    let artifact = ReportArtifact {
        config: config.clone(),
        metrics: evaluation.report.clone(),
    };
    atomic_write_json(&dir.join("report.json"), &artifact)
        .map_err(io_err("writing report.json"))?;
    let series = horizon_series(&evaluation.matrix, config.plot_horizon)?;
    let echo = serde_json::to_string(config)
        .map_err(|e| PipelineError::Setup(format!("config echo: {e}")))?;
    let title = format!("{}-day-ahead forecast vs actual", config.plot_horizon);
    emit_plot(
        &series,
        &title,
        Some(&echo),
        &dir.join(format!("plot_h{}.svg", config.plot_horizon)),
    )?;
    Ok(())
}

/// One run's aggregate metrics inside an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub mape_percent: f64,
    pub rmse: f64,
    pub corr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub mape_percent: f64,
    pub rmse: f64,
    pub corr: f64,
}

/// Multi-run experiment result: per-run aggregates and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub runs: Vec<RunSummary>,
    pub mean: MeanMetrics,
}

/// Trains and evaluates `repeat_count` runs (run i uses seed + i), writing
/// each run's artifacts under `dir/run_<i>` and the averaged report at
/// `dir/mean_report.json`.
pub fn run_experiment(config: &RunConfig, dir: &Path) -> PipelineResult<ExperimentReport> {
    let mut runs = Vec::with_capacity(config.repeat_count);
    for i in 0..config.repeat_count {
        let mut run_config = config.clone();
        run_config.train.seed = config.train.seed + i as u64;
        let run_dir = dir.join(format!("run_{i}"));
        log::info!(
            "run {i}/{}: seed {}",
            config.repeat_count,
            run_config.train.seed
        );
        let artifacts = run_training(&run_config)?;
        write_train_artifacts(&artifacts, &run_dir)?;
        let evaluation = evaluate_checkpoint(&run_config, &artifacts.checkpoint)?;
        write_eval_artifacts(&run_config, &evaluation, &run_dir)?;
        runs.push(RunSummary {
            seed: run_config.train.seed,
            mape_percent: evaluation.report.mape_percent,
            rmse: evaluation.report.rmse,
            corr: evaluation.report.corr,
        });
    }
    let n = runs.len() as f64;
    let mean = MeanMetrics {
        mape_percent: runs.iter().map(|r| r.mape_percent).sum::<f64>() / n,
        rmse: runs.iter().map(|r| r.rmse).sum::<f64>() / n,
        corr: runs.iter().map(|r| r.corr).sum::<f64>() / n,
    };
    let report = ExperimentReport {
        config: config.clone(),
        runs,
        mean,
    };
    std::fs::create_dir_all(dir).map_err(io_err(&format!("creating {}", dir.display())))?;
    atomic_write_json(&dir.join("mean_report.json"), &report)
        .map_err(io_err("writing mean_report.json"))?;
    Ok(report)
}

/// A dated k-day forecast in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSeries {
    pub as_of: NaiveDate,
    pub points: Vec<ForecastPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastPoint {
    pub date: NaiveDate,
    pub value: f64,
}

/// Forecasts the horizon directly after `as_of` using the checkpoint's
/// final parameters. The frame must cover the m-day lookback window ending
/// at `as_of`.
pub fn forecast(
    config: &RunConfig,
    checkpoint: &Checkpoint,
    as_of: NaiveDate,
) -> PipelineResult<ForecastSeries> {
    let (frame, model) = load_frame(config)?;
    if checkpoint.model_config != model {
        return Err(PipelineError::Setup(
            "checkpoint model config does not match the run config".into(),
        ));
    }
    let scaler = checkpoint_scaler(checkpoint)?;
    let params = checkpoint.final_params()?;
    let m = model.input_window;
    let index = frame.index_of(as_of).ok_or_else(|| {
        PipelineError::Setup(format!(
            "as-of date {as_of} is outside the data range {}..={}",
            frame.start_date(),
            frame.end_date().map(|d| d.to_string()).unwrap_or_default()
        ))
    })?;
    if index + 1 < m {
        let needed = as_of - Days::new((m - 1) as u64);
        return Err(PipelineError::Setup(format!(
            "forecasting as of {as_of} needs data over [{needed}, {as_of}], but the frame starts {}",
            frame.start_date()
        )));
    }
    let scaled = scaler.apply(&frame)?;
    let x = input_window_at(&scaled, index, m)?;
    let segment = Segment {
        t_index: index,
        x,
        y: Tensor::zeros(vec![model.horizon]),
    };
    let scaled_pred = predict(&model, &params, &segment)?;
    let values = scaler.invert_target(&scaled_pred)?;
    let points = values
        .into_iter()
        .enumerate()
        .map(|(i, value)| ForecastPoint {
            date: as_of + Days::new(i as u64 + 1),
            value,
        })
        .collect();
    Ok(ForecastSeries { as_of, points })
}

/// Writes a dataset directory for later csv-dir runs, refusing to clobber a
/// non-empty directory unless forced.
pub fn write_dataset(
    frame: &MultivariateFrame,
    dir: &Path,
    force: bool,
) -> PipelineResult<PathBuf> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .map_err(io_err(&format!("reading {}", dir.display())))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(PipelineError::Setup(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(io_err(&format!("creating {}", dir.display())))?;
    frame.save(dir)?;
    Ok(dir.to_path_buf())
}
