//! Run configuration: one strict JSON schema covering data source, window
//! sizes, model and optimizer settings, augmentation, evaluation, and output
//! layout, plus the named experiment presets.
//!
//! Unknown keys are rejected everywhere so an experiment file cannot
//! silently misspell a setting.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SynthSpec;
use crate::model::MhacConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("config: {0}")]
    Invalid(String),
    #[error("unknown preset '{0}'; valid presets: no_attention, no_weightnorm, single_cnn, drop_variable:<name>, augment_factor:<n>, batch_size:<n>")]
    UnknownPreset(String),
}

pub type ConfigResult<T> = Result<T, ConfigError>;

/// Where the five-variable frame comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Generate a synthetic frame in memory (or on disk via `synth`).
    Synth { spec: SynthSpec },
    /// Load a saved dataset directory (per-variable CSVs plus manifest).
    CsvDir { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synth {
            spec: SynthSpec::default(),
        }
    }
}

/// Top-level experiment description. The defaults reproduce the reference
/// setup end to end on synthetic data: 30-day windows, 30-day horizon,
/// 9 augmented copies per segment, 5 repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSource,
    /// Last day of the training range; forecasts are evaluated strictly
    /// after it.
    pub train_test_boundary: NaiveDate,
    pub model: MhacConfig,
    pub train: TrainConfig,
    /// Noised copies generated per training segment (0 disables).
    pub augment_factor: usize,
    /// Noise variance per variable is this factor times the variable's
    /// pooled variance.
    pub noise_sigma_scale: f64,
    pub augment_seed: u64,
    /// Variables removed from the frame (and the matching model heads)
    /// before training.
    pub drop_variables: Vec<String>,
    /// |truth| threshold under which points leave the MAPE.
    pub zero_floor: f64,
    /// 1-based horizon sliced for the evaluation plot.
    pub plot_horizon: usize,
    /// Independent train+evaluate runs averaged by experiments.
    pub repeat_count: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            train_test_boundary: NaiveDate::from_ymd_opt(2019, 5, 31).expect("valid date"),
            model: MhacConfig::default(),
            train: TrainConfig::default(),
            augment_factor: 9,
            noise_sigma_scale: crate::augment::DEFAULT_SIGMA_SCALE,
            augment_seed: 1,
            drop_variables: vec![],
            zero_floor: crate::eval::DEFAULT_ZERO_FLOOR,
            plot_horizon: 1,
            repeat_count: 5,
            output_dir: PathBuf::from("mhac-out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> ConfigResult<Self> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig =
            serde_json::from_slice(&bytes).map_err(|source| ConfigError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> ConfigResult<()> {
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let DataSource::Synth { spec } = &self.data {
            spec.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if !(self.noise_sigma_scale.is_finite() && self.noise_sigma_scale > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "noise_sigma_scale must be positive, got {}",
                self.noise_sigma_scale
            )));
        }
        if !(self.zero_floor.is_finite() && self.zero_floor >= 0.0) {
            return Err(ConfigError::Invalid(format!(
                "zero_floor must be non-negative, got {}",
                self.zero_floor
            )));
        }
        if self.plot_horizon == 0 || self.plot_horizon > self.model.horizon {
            return Err(ConfigError::Invalid(format!(
                "plot_horizon {} is out of range 1..={}",
                self.plot_horizon, self.model.horizon
            )));
        }
        if self.repeat_count == 0 {
            return Err(ConfigError::Invalid("repeat_count must be >= 1".into()));
        }
        if self.drop_variables.iter().any(|n| n.is_empty()) {
            return Err(ConfigError::Invalid("drop_variables entries must be named".into()));
        }
        Ok(())
    }
}

/// Named experiment variants matching the comparison tables: architecture
/// ablations, variable drops, and augmentation/batch-size sweeps.
#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    NoAttention,
    NoWeightnorm,
    SingleCnn,
    DropVariable(String),
    AugmentFactor(usize),
    BatchSize(usize),
}

impl std::str::FromStr for Preset {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || ConfigError::UnknownPreset(s.to_string());
        match s {
            "no_attention" => return Ok(Self::NoAttention),
            "no_weightnorm" => return Ok(Self::NoWeightnorm),
            "single_cnn" => return Ok(Self::SingleCnn),
            _ => {}
        }
        let (head, arg) = s.split_once(':').ok_or_else(unknown)?;
        match head {
            "drop_variable" if !arg.is_empty() => Ok(Self::DropVariable(arg.to_string())),
            "augment_factor" => arg.parse().map(Self::AugmentFactor).map_err(|_| unknown()),
            "batch_size" => {
                let n: usize = arg.parse().map_err(|_| unknown())?;
                if n == 0 {
                    return Err(unknown());
                }
                Ok(Self::BatchSize(n))
            }
            _ => Err(unknown()),
        }
    }
}

impl Preset {
    /// Filesystem-safe name for per-preset output directories.
    pub fn slug(&self) -> String {
        match self {
            Self::NoAttention => "no_attention".into(),
            Self::NoWeightnorm => "no_weightnorm".into(),
            Self::SingleCnn => "single_cnn".into(),
            Self::DropVariable(name) => format!("drop_variable_{name}"),
            Self::AugmentFactor(n) => format!("augment_factor_{n}"),
            Self::BatchSize(n) => format!("batch_size_{n}"),
        }
    }

    /// Returns a copy of `config` with this preset applied.
    pub fn apply(&self, config: &RunConfig) -> ConfigResult<RunConfig> {
        let mut out = config.clone();
        match self {
            Self::NoAttention => out.model.use_attention = false,
            Self::NoWeightnorm => out.model.use_weightnorm = false,
            Self::SingleCnn => out.model.single_cnn = true,
            Self::DropVariable(name) => {
                if out.drop_variables.contains(name) {
                    return Err(ConfigError::Invalid(format!(
                        "variable '{name}' is already dropped"
                    )));
                }
                out.drop_variables.push(name.clone());
            }
            Self::AugmentFactor(n) => out.augment_factor = *n,
            Self::BatchSize(n) => out.train.batch_size = *n,
        }
        out.validate()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
        assert_eq!(back.repeat_count, 5);
        assert_eq!(back.augment_factor, 9);
    }

    #[test]
    fn empty_object_parses_to_defaults() {
        let config: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"epochs": 3}"#).is_err());
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"train": {"epochs": 3, "lr": 0.1}}"#).is_err()
        );
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"window": 10}}"#).is_err());
    }

    #[test]
    fn nested_overrides_apply() {
        let config: RunConfig = serde_json::from_str(
            r#"{"train": {"epochs": 3, "seed": 11}, "model": {"input_window": 10, "horizon": 5}, "plot_horizon": 5}"#,
        )
        .unwrap();
        assert_eq!(config.train.epochs, 3);
        assert_eq!(config.train.seed, 11);
        assert_eq!(config.model.input_window, 10);
        assert_eq!(config.train.batch_size, 4);
        config.validate().unwrap();
    }

    #[test]
    fn load_validates_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"plot_horizon": 99}"#).unwrap();
        assert!(matches!(
            RunConfig::load(&path),
            Err(ConfigError::Invalid(_))
        ));
        std::fs::write(&path, "{").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(ConfigError::Json { .. })));
        assert!(matches!(
            RunConfig::load(&dir.path().join("missing.json")),
            Err(ConfigError::Io { .. })
        ));
    }

    #[test]
    fn presets_parse_and_apply() {
        let base = RunConfig::default();
        let p: Preset = "no_attention".parse().unwrap();
        assert!(!p.apply(&base).unwrap().model.use_attention);
        let p: Preset = "no_weightnorm".parse().unwrap();
        assert!(!p.apply(&base).unwrap().model.use_weightnorm);
        let p: Preset = "single_cnn".parse().unwrap();
        assert!(p.apply(&base).unwrap().model.single_cnn);
        let p: Preset = "drop_variable:disease".parse().unwrap();
        assert_eq!(
            p.apply(&base).unwrap().drop_variables,
            vec!["disease".to_string()]
        );
        let p: Preset = "augment_factor:0".parse().unwrap();
        assert_eq!(p.apply(&base).unwrap().augment_factor, 0);
        let p: Preset = "batch_size:16".parse().unwrap();
        assert_eq!(p.apply(&base).unwrap().train.batch_size, 16);
    }

    #[test]
    fn preset_slugs_are_path_safe() {
        let cases = [
            ("no_attention", "no_attention"),
            ("drop_variable:season", "drop_variable_season"),
            ("augment_factor:3", "augment_factor_3"),
            ("batch_size:16", "batch_size_16"),
        ];
        for (s, slug) in cases {
            let p: Preset = s.parse().unwrap();
            assert_eq!(p.slug(), slug);
        }
    }

    #[test]
    fn unknown_presets_are_rejected_with_listing() {
        for bad in ["no_such", "drop_variable:", "batch_size:x", "batch_size:0", "augment_factor:-1"] {
            let err = bad.parse::<Preset>().unwrap_err();
            assert!(err.to_string().contains("valid presets"), "{bad}: {err}");
        }
    }
}
