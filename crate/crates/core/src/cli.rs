//! Command-line interface: argument parsing, config merging, and the
//! mapping from subcommands to pipeline calls.
//!
//! Exit codes: 0 on success, 1 for pipeline failures (data, training,
//! evaluation, IO), 2 for configuration and usage errors (bad flags, bad
//! config files, unknown presets). Log verbosity comes from the `MHAC_LOG`
//! environment variable (`error`, `warn`, `info`, `debug`, `trace`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, Preset, RunConfig};
use crate::pipeline::{
    evaluate_checkpoint, forecast, run_experiment, run_training, synthesize, write_dataset,
    write_eval_artifacts, write_train_artifacts, PipelineError,
};
use crate::train::Checkpoint;
use crate::util::atomic_write_json;

pub const EXIT_OK: u8 = 0;
pub const EXIT_PIPELINE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mhac",
    version,
    about = "Multi-head attention CNN forecasting for multivariate daily time series",
    after_help = "Set MHAC_LOG=info (or debug) for progress output on stderr."
)]
pub struct Cli {
    /// Run-config JSON file; every field has a default, so it may be omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Training seed; overrides the config's train.seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured synthetic dataset as a CSV directory.
    Synth,
    /// Train a model; writes checkpoint.json, scaler.json and history.jsonl.
    Train,
    /// Score a checkpoint on the test range, or, without one, train
    /// repeat_count fresh runs and report their averaged metrics.
    Evaluate {
        /// Checkpoint to score; omit to train and average repeated runs.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Run a model variation as a repeated experiment.
    Ablate {
        /// One of: no_attention, no_weightnorm, single_cnn,
        /// drop_variable:<name>, augment_factor:<n>, batch_size:<n>.
        preset: String,
    },
    /// Predict the horizon directly after a date using a trained checkpoint.
    Forecast {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Last observed date the forecast is anchored on (YYYY-MM-DD).
        #[arg(long, value_name = "DATE")]
        as_of: NaiveDate,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(#[from] ConfigError),
    #[error("{0}")]
    Pipeline(#[from] PipelineError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::train::TrainError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            _ => EXIT_PIPELINE,
        }
    }
}

/// Parses argv and runs the requested command. Usage errors from clap exit
/// with code 2 before this returns.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MHAC_LOG", "warn")).init();
    match execute(&cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(err) => {
            eprintln!("error: {err:#}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code())
        }
    }
}

/// Loads the config file (or defaults) and applies flag overrides:
/// flag > file > default.
fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(&config, cli.force),
        Command::Train => cmd_train(&config),
        Command::Evaluate { checkpoint } => cmd_evaluate(&config, checkpoint.as_deref()),
        Command::Ablate { preset } => cmd_ablate(&config, preset),
        Command::Forecast { checkpoint, as_of } => {
            cmd_forecast(&config, checkpoint, *as_of, cli.out.is_some())
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io {
        context: "serializing output".into(),
        source: std::io::Error::other(e),
    })?;
    println!("{text}");
    Ok(())
}

fn cmd_synth(config: &RunConfig, force: bool) -> Result<(), CliError> {
    let frame = synthesize(config)?;
    let dir = write_dataset(&frame, &config.output_dir, force)?;
    println!("wrote {} days across {} variables to {}",
        frame.len_days(),
        frame.variables().len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    let artifacts = run_training(config)?;
    write_train_artifacts(&artifacts, &config.output_dir)?;
    println!(
        "trained {} epochs (best epoch {}); wrote checkpoint.json, scaler.json, history.jsonl to {}",
        artifacts.history.records.len(),
        artifacts.checkpoint.best_epoch,
        config.output_dir.display()
    );
    Ok(())
}

fn cmd_evaluate(config: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    match checkpoint {
        Some(path) => {
            let checkpoint = Checkpoint::load(path)?;
            let evaluation = evaluate_checkpoint(config, &checkpoint)?;
            write_eval_artifacts(config, &evaluation, &config.output_dir)?;
            print_json(&evaluation.report)
        }
        None => {
            let report = run_experiment(config, &config.output_dir)?;
            print_json(&report)
        }
    }
}

fn cmd_ablate(config: &RunConfig, preset: &str) -> Result<(), CliError> {
    let preset: Preset = preset.parse()?;
    let applied = preset.apply(config)?;
    let dir = config.output_dir.join(format!("ablate_{}", preset.slug()));
    let report = run_experiment(&applied, &dir)?;
    print_json(&report)
}

/// File artifact written by `forecast --out`: the echoed config plus the
/// dated predictions.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct ForecastArtifact {
    pub config: RunConfig,
    pub forecast: crate::pipeline::ForecastSeries,
}

fn cmd_forecast(
    config: &RunConfig,
    checkpoint: &Path,
    as_of: NaiveDate,
    write_file: bool,
) -> Result<(), CliError> {
    let checkpoint = Checkpoint::load(checkpoint)?;
    let series = forecast(config, &checkpoint, as_of)?;
    if write_file {
        std::fs::create_dir_all(&config.output_dir).map_err(|source| CliError::Io {
            context: format!("creating {}", config.output_dir.display()),
            source,
        })?;
        let artifact = ForecastArtifact {
            config: config.clone(),
            forecast: series.clone(),
        };
        atomic_write_json(&config.output_dir.join("forecast.json"), &artifact).map_err(
            |source| CliError::Io {
                context: "writing forecast.json".into(),
                source,
            },
        )?;
    }
    print_json(&series.points)
}
