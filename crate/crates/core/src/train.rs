//! MSE training loop with Adam, validation tracking, and checkpointing.
//!
//! The caller splits its segments into train/validation sides first (see
//! [`split_validation`]) and augments only the training side, so validation
//! never leaks into noise statistics or parameter updates. All randomness
//! (init, dropout, per-epoch shuffles) derives from one master seed through
//! independent sub-streams, making runs bit-reproducible on one platform.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Scaler, Segment, SegmentSet};
use crate::model::{
    check_segments, forward_on_tape, init_params, MhacConfig, MhacParams, ModelError, ParamVars,
};
use crate::nn::{DropoutMode, NnResult, Tape, Tensor, Var};
use crate::util::{atomic_write, atomic_write_json, sub_seed};

/// Version tag for the checkpoint file format.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const STREAM_INIT: u64 = 0;
const STREAM_DROPOUT: u64 = 1;
/// Epoch e shuffles with stream SHUFFLE_BASE + e (e >= 1), clear of the
/// init/dropout streams.
const STREAM_SHUFFLE_BASE: u64 = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("validation split: {0}")]
    Split(String),
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Optimization hyperparameters. Defaults: Adam at learning rate 0.001 with
/// betas (0.9, 0.999) and epsilon 1e-8, 50 epochs, batch size 4, and a 20%
/// validation fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Master seed for init, dropout, and shuffling.
    pub seed: u64,
    /// Split validation from the chronological tail instead of a seeded
    /// shuffle.
    pub chronological_split: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 50,
            batch_size: 4,
            validation_fraction: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            chronological_split: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be >= 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return fail(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// One epoch's summary as written to the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken this epoch, i.e. the number of batches.
    pub steps: usize,
    pub train_loss: f64,
    /// None when training runs without a validation set.
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Loss trajectories without wall-clock noise, for determinism checks.
    pub fn losses(&self) -> (Vec<f64>, Vec<Option<f64>>) {
        (
            self.records.iter().map(|r| r.train_loss).collect(),
            self.records.iter().map(|r| r.val_loss).collect(),
        )
    }

    /// Writes one JSON object per epoch, atomically.
    pub fn write_jsonl(&self, path: &Path) -> TrainResult<()> {
        let mut buf = Vec::new();
        for record in &self.records {
            let line = serde_json::to_vec(record).map_err(|source| TrainError::Json {
                path: path.to_path_buf(),
                source,
            })?;
            buf.extend_from_slice(&line);
            buf.push(b'\n');
        }
        atomic_write(path, &buf).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Result of one training run: final-epoch parameters plus the best
/// validation-epoch parameters (equal when no validation set is used and the
/// train loss picks the best epoch instead).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: MhacParams,
    pub best_params: MhacParams,
    /// 1-based epoch whose parameters are `best_params`.
    pub best_epoch: usize,
    pub history: TrainHistory,
    pub total_steps: usize,
}

/// Mean squared error over all elements of two equal-shaped tensors.
pub fn mse_loss(pred: &Tensor, truth: &Tensor) -> NnResult<f64> {
    if pred.shape() != truth.shape() {
        return Err(crate::nn::NnError::ShapeMismatch {
            op: "mse_loss",
            detail: format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        });
    }
    if pred.is_empty() {
        return Err(crate::nn::NnError::InvalidArgument {
            op: "mse_loss",
            detail: "empty tensors".into(),
        });
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Adam first/second-moment state, one pair of tensors per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &MhacParams) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update in place.
    pub fn apply(
        &mut self,
        params: &mut MhacParams,
        grads: &[Tensor],
        config: &TrainConfig,
    ) -> TrainResult<()> {
        let mut tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(TrainError::Config(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                tensors.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let m_corr = 1.0 - config.beta1.powi(t);
        let v_corr = 1.0 - config.beta2.powi(t);
        for (i, param) in tensors.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = param.data_mut();
            for j in 0..p.len() {
                m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
                v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
                let m_hat = m[j] / m_corr;
                let v_hat = v[j] / v_corr;
                p[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
        Ok(())
    }
}

/// Splits segments into (train, validation). The validation side holds
/// round(fraction * n) segments, chosen by a seeded shuffle (or the
/// chronological tail when `chronological` is set); both sides keep ascending
/// time order.
pub fn split_validation(
    set: &SegmentSet,
    fraction: f64,
    seed: u64,
    chronological: bool,
) -> TrainResult<(SegmentSet, SegmentSet)> {
    let n = set.segments.len();
    if n < 2 {
        return Err(TrainError::Split(format!("need at least 2 segments, got {n}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::Split(format!("fraction must lie in (0, 1), got {fraction}")));
    }
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(TrainError::Split(format!(
            "fraction {fraction} of {n} segments leaves an empty side"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    if !chronological {
        indices.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    }
    let (train_idx, val_idx) = indices.split_at(n - n_val);
    let mut train_idx = train_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let subset = |idx: &[usize]| SegmentSet {
        segments: idx.iter().map(|&i| set.segments[i].clone()).collect(),
        m: set.m,
        k: set.k,
        provenance: set.provenance,
        specs: set.specs.clone(),
        start_date: set.start_date,
    };
    Ok((subset(&train_idx), subset(&val_idx)))
}

/// Forward/backward over one mini-batch. The loss is the mean of per-segment
/// MSE values; returned gradients follow [`MhacConfig::param_layout`] order.
/// Gradient state lives on the per-call tape, so nothing carries across
/// steps.
pub fn step_gradients(
    config: &MhacConfig,
    params: &MhacParams,
    batch: &[&Segment],
    mode: DropoutMode,
    mut dropout_rng: Option<&mut ChaCha12Rng>,
) -> Result<(f64, Vec<Tensor>), ModelError> {
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, params);
    let mut losses = Vec::with_capacity(batch.len());
    for segment in batch {
        let x: Vec<Var> = segment.x.iter().map(|t| tape.input(t.clone())).collect();
        let out = forward_on_tape(&mut tape, config, &vars, &x, mode, dropout_rng.as_deref_mut())?;
        losses.push(tape.mse_against(out, &segment.y)?);
    }
    let loss = tape.mean_scalars(&losses)?;
    let grads = tape.backward(loss)?;
    let loss_value = tape.value(loss).item()?;
    let grad_tensors = vars.all().into_iter().map(|v| grads.wrt(v).clone()).collect();
    Ok((loss_value, grad_tensors))
}

/// Mean per-segment MSE of inference-mode forecasts over a whole set.
/// Dropout is off, so repeated calls return identical values.
pub fn dataset_loss(
    config: &MhacConfig,
    params: &MhacParams,
    set: &SegmentSet,
) -> TrainResult<f64> {
    if set.segments.is_empty() {
        return Err(TrainError::Config("loss over an empty segment set".into()));
    }
    let mut sum = 0.0;
    for segment in &set.segments {
        let pred = crate::model::predict(config, params, segment)?;
        let pred = Tensor::vector(pred).map_err(ModelError::from)?;
        sum += mse_loss(&pred, &segment.y).map_err(ModelError::from)?;
    }
    Ok(sum / set.segments.len() as f64)
}

/// Runs the full optimization loop over a prepared train/validation pair.
///
/// `val_set` may be empty, in which case best-epoch selection falls back to
/// the training loss. Every epoch shuffles the training segments with a
/// fresh sub-seed, walks them in mini-batches (one Adam step each), then
/// records train/validation losses and wall time.
pub fn train(
    model_config: &MhacConfig,
    train_config: &TrainConfig,
    train_set: &SegmentSet,
    val_set: &SegmentSet,
) -> TrainResult<TrainOutcome> {
    model_config.validate()?;
    train_config.validate()?;
    if train_set.segments.is_empty() {
        return Err(TrainError::Config("no training segments".into()));
    }
    check_segments(model_config, train_set)?;
    if !val_set.segments.is_empty() {
        check_segments(model_config, val_set)?;
    }

    let seed = train_config.seed;
    let mut init_rng = ChaCha12Rng::seed_from_u64(sub_seed(seed, STREAM_INIT));
    let mut params = init_params(model_config, &mut init_rng)?;
    let mut dropout_rng = ChaCha12Rng::seed_from_u64(sub_seed(seed, STREAM_DROPOUT));
    let mut adam = AdamState::new(&params);

    let n = train_set.segments.len();
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_metric = f64::INFINITY;
    let mut records = Vec::with_capacity(train_config.epochs);
    let mut total_steps = 0usize;

    for epoch in 1..=train_config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha12Rng::seed_from_u64(sub_seed(
            seed,
            STREAM_SHUFFLE_BASE + epoch as u64,
        )));
        let mut loss_sum = 0.0;
        let mut epoch_steps = 0;
        for (batch_idx, chunk) in order.chunks(train_config.batch_size).enumerate() {
            let batch: Vec<&Segment> = chunk.iter().map(|&i| &train_set.segments[i]).collect();
            let (loss, grads) = step_gradients(
                model_config,
                &params,
                &batch,
                DropoutMode::Train,
                Some(&mut dropout_rng),
            )
            .map_err(|source| TrainError::Step {
                epoch,
                batch: batch_idx,
                source,
            })?;
            adam.apply(&mut params, &grads, train_config)?;
            loss_sum += loss * chunk.len() as f64;
            epoch_steps += 1;
            total_steps += 1;
        }
        let train_loss = loss_sum / n as f64;
        let val_loss = if val_set.segments.is_empty() {
            None
        } else {
            Some(dataset_loss(model_config, &params, val_set)?)
        };
        let metric = val_loss.unwrap_or(train_loss);
        if metric < best_metric {
            best_metric = metric;
            best_epoch = epoch;
            best_params = params.clone();
        }
        let seconds = started.elapsed().as_secs_f64();
        log::debug!(
            "epoch {epoch}/{}: train_loss={train_loss:.6e} val_loss={val_loss:?} ({seconds:.2}s)",
            train_config.epochs
        );
        records.push(EpochRecord {
            epoch,
            steps: epoch_steps,
            train_loss,
            val_loss,
            seconds,
        });
    }

    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_epoch,
        history: TrainHistory { records },
        total_steps,
    })
}

/// Persisted training result: config echo, the fitted scaler, and both the
/// final-epoch and best-validation-epoch parameter sets as named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: MhacConfig,
    pub train_config: TrainConfig,
    /// Opaque echo of the full run configuration that produced this
    /// checkpoint, if one existed; kept as JSON so this type does not
    /// depend on any particular config schema.
    #[serde(default)]
    pub config_echo: Option<serde_json::Value>,
    pub scaler: Option<Scaler>,
    pub best_epoch: usize,
    pub final_tensors: BTreeMap<String, Tensor>,
    pub best_tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(
        model_config: MhacConfig,
        train_config: TrainConfig,
        scaler: Option<Scaler>,
        outcome: &TrainOutcome,
    ) -> Self {
        let names: Vec<String> = model_config.param_layout().into_iter().map(|(n, _)| n).collect();
        let to_map = |params: &MhacParams| {
            names
                .iter()
                .cloned()
                .zip(params.tensors().into_iter().cloned())
                .collect::<BTreeMap<String, Tensor>>()
        };
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config,
            train_config,
            config_echo: None,
            scaler,
            best_epoch: outcome.best_epoch,
            final_tensors: to_map(&outcome.final_params),
            best_tensors: to_map(&outcome.best_params),
        }
    }

    pub fn final_params(&self) -> Result<MhacParams, ModelError> {
        MhacParams::from_named(&self.model_config, self.final_tensors.clone())
    }

    pub fn best_params(&self) -> Result<MhacParams, ModelError> {
        MhacParams::from_named(&self.model_config, self.best_tensors.clone())
    }

    pub fn save(&self, path: &Path) -> TrainResult<()> {
        atomic_write_json(path, self).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads and fully validates a checkpoint: format version, config
    /// invariants, and every tensor shape against the config layout.
    pub fn load(path: &Path) -> TrainResult<Self> {
        let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let checkpoint: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|source| TrainError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "format version {} is unsupported (expected {})",
                checkpoint.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        checkpoint.model_config.validate()?;
        checkpoint.train_config.validate()?;
        checkpoint.final_params()?;
        checkpoint.best_params()?;
        Ok(checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        make_segments, split_train_test, synth_generate, Provenance, Scaler, SynthSpec,
    };
    use chrono::NaiveDate;
    use rand::Rng;

    fn tiny_model() -> MhacConfig {
        MhacConfig {
            input_window: 6,
            horizon: 3,
            head_channels: vec![1, 1, 1, 4, 1],
            out_channels: 2,
            kernel_sizes: vec![3, 2, 2, 2, 3],
            pool_size: 2,
            attention_dim: 4,
            ..MhacConfig::default()
        }
    }

    fn synth_segments(days: usize, m: usize, k: usize) -> SegmentSet {
        let spec = SynthSpec {
            length_days: days,
            politics_shocks: vec![],
            disease_shocks: vec![],
            ..SynthSpec::default()
        };
        let frame = synth_generate(&spec).unwrap();
        let end = frame.end_date().unwrap();
        let scaler = Scaler::fit(&frame, end).unwrap();
        let scaled = scaler.apply(&frame).unwrap();
        make_segments(&scaled, m, k, Provenance::Train).unwrap()
    }

    fn empty_like(set: &SegmentSet) -> SegmentSet {
        SegmentSet {
            segments: vec![],
            m: set.m,
            k: set.k,
            provenance: set.provenance,
            specs: set.specs.clone(),
            start_date: set.start_date,
        }
    }

    #[test]
    fn mse_loss_matches_oracles() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        let b = Tensor::vector(vec![3.0, 4.0, 5.0]).unwrap();
        assert_eq!(mse_loss(&a, &b).unwrap(), 4.0);

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let p: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let t: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
        let oracle =
            p.iter().zip(&t).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 12.0;
        let pm = Tensor::matrix(3, 4, p).unwrap();
        let tm = Tensor::matrix(3, 4, t).unwrap();
        assert!((mse_loss(&pm, &tm).unwrap() - oracle).abs() < 1e-12);
        let short = Tensor::vector(vec![1.0]).unwrap();
        assert!(mse_loss(&a, &short).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let config = tiny_model();
        let mut params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(1)).unwrap();
        let before = params.clone();
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let mut state = AdamState::new(&params);
        state.apply(&mut params, &zeros, &TrainConfig::default()).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_approaches_signed_learning_rate() {
        let config = tiny_model();
        let mut params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(2)).unwrap();
        let before = params.clone();
        // Large constant gradients, alternating sign per tensor.
        let grads: Vec<Tensor> = params
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                Tensor::new(t.shape().to_vec(), vec![sign * 1e3; t.len()]).unwrap()
            })
            .collect();
        let train_config = TrainConfig::default();
        let mut state = AdamState::new(&params);
        state.apply(&mut params, &grads, &train_config).unwrap();
        for ((i, after), before) in params.tensors().iter().enumerate().zip(before.tensors()) {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            for (a, b) in after.data().iter().zip(before.data()) {
                let delta = a - b;
                assert!(
                    (delta + sign * train_config.learning_rate).abs() < 1e-9,
                    "tensor {i}: step {delta}"
                );
            }
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let config = tiny_model();
        let params0 = init_params(&config, &mut ChaCha12Rng::seed_from_u64(4)).unwrap();
        let grads: Vec<Tensor> = params0
            .tensors()
            .iter()
            .map(|t| {
                let mut rng = ChaCha12Rng::seed_from_u64(t.len() as u64);
                Tensor::new(
                    t.shape().to_vec(),
                    (0..t.len()).map(|_| rng.random::<f64>() - 0.5).collect(),
                )
                .unwrap()
            })
            .collect();
        let run = || {
            let mut p = params0.clone();
            let mut s = AdamState::new(&p);
            for _ in 0..5 {
                s.apply(&mut p, &grads, &TrainConfig::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn split_sizes_partition_and_determinism() {
        let set = synth_segments(18, 6, 3); // 10 segments
        assert_eq!(set.segments.len(), 10);
        let (train, val) = split_validation(&set, 0.2, 7, false).unwrap();
        assert_eq!(train.segments.len(), 8);
        assert_eq!(val.segments.len(), 2);
        let mut all: Vec<usize> = train
            .segments
            .iter()
            .chain(&val.segments)
            .map(|s| s.t_index)
            .collect();
        all.sort_unstable();
        let expected: Vec<usize> = set.segments.iter().map(|s| s.t_index).collect();
        assert_eq!(all, expected);
        let (train2, val2) = split_validation(&set, 0.2, 7, false).unwrap();
        assert_eq!(train.segments.len(), train2.segments.len());
        assert_eq!(
            val.segments.iter().map(|s| s.t_index).collect::<Vec<_>>(),
            val2.segments.iter().map(|s| s.t_index).collect::<Vec<_>>()
        );
    }

    #[test]
    fn split_chronological_takes_the_tail() {
        let set = synth_segments(18, 6, 3);
        let (train, val) = split_validation(&set, 0.2, 0, true).unwrap();
        let max_train = train.segments.iter().map(|s| s.t_index).max().unwrap();
        let min_val = val.segments.iter().map(|s| s.t_index).min().unwrap();
        assert!(max_train < min_val);
    }

    #[test]
    fn split_rejects_degenerate_cases() {
        let set = synth_segments(18, 6, 3);
        assert!(split_validation(&set, 0.01, 0, false).is_err()); // rounds to 0
        assert!(split_validation(&set, 0.99, 0, false).is_err()); // rounds to n
        let one = SegmentSet {
            segments: set.segments[..1].to_vec(),
            ..empty_like(&set)
        };
        assert!(split_validation(&one, 0.5, 0, false).is_err());
    }

    #[test]
    fn one_epoch_of_41_segments_takes_9_steps() {
        // 49 days with m=6, k=3 cut exactly 41 segments; a 20% split leaves
        // 33 for training, i.e. ceil(33/4) = 9 Adam steps.
        let set = synth_segments(49, 6, 3);
        assert_eq!(set.segments.len(), 41);
        let (train_set, val_set) = split_validation(&set, 0.2, 11, false).unwrap();
        assert_eq!(train_set.segments.len(), 33);
        let config = tiny_model();
        let train_config = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let outcome = train(&config, &train_config, &train_set, &val_set).unwrap();
        assert_eq!(outcome.total_steps, 9);
        assert_eq!(outcome.history.records.len(), 1);
        assert!(outcome.history.records[0].val_loss.is_some());
    }

    #[test]
    fn tiny_set_overfits_within_200_epochs() {
        // 16 days cut 8 segments; the model must be able to memorize them.
        let set = synth_segments(16, 6, 3);
        assert_eq!(set.segments.len(), 8);
        let config = MhacConfig {
            dropout_rate: 0.0,
            ..tiny_model()
        };
        let train_config = TrainConfig {
            epochs: 200,
            seed: 3,
            // 8 segments give only 2 steps per epoch; a higher rate keeps
            // the memorization check fast.
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let outcome = train(&config, &train_config, &set, &empty_like(&set)).unwrap();
        let first = outcome.history.records.first().unwrap().train_loss;
        let last = outcome.history.records.last().unwrap().train_loss;
        assert!(
            last < 0.05 * first,
            "loss went {first:.6} -> {last:.6}, expected < 5% of start"
        );
    }

    #[test]
    fn training_is_bit_reproducible() {
        let set = synth_segments(30, 6, 3);
        let (train_set, val_set) = split_validation(&set, 0.2, 5, false).unwrap();
        let config = tiny_model();
        let train_config = TrainConfig {
            epochs: 3,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(&config, &train_config, &train_set, &val_set).unwrap();
        let b = train(&config, &train_config, &train_set, &val_set).unwrap();
        assert_eq!(a.history.losses(), b.history.losses());
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.best_params, b.best_params);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn validation_loss_is_stable_across_calls() {
        let set = synth_segments(30, 6, 3);
        let config = tiny_model();
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(8)).unwrap();
        let a = dataset_loss(&config, &params, &set).unwrap();
        let b = dataset_loss(&config, &params, &set).unwrap();
        assert_eq!(a, b);
        assert!(dataset_loss(&config, &params, &empty_like(&set)).is_err());
    }

    #[test]
    fn identical_batches_give_identical_gradients() {
        let set = synth_segments(20, 6, 3);
        let config = tiny_model();
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(10)).unwrap();
        let batch: Vec<&Segment> = set.segments[..4].iter().collect();
        let (l1, g1) =
            step_gradients(&config, &params, &batch, DropoutMode::Infer, None).unwrap();
        let (l2, g2) =
            step_gradients(&config, &params, &batch, DropoutMode::Infer, None).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn batch_gradient_is_mean_of_per_segment_gradients() {
        let set = synth_segments(20, 6, 3);
        let config = tiny_model();
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(11)).unwrap();
        let batch: Vec<&Segment> = set.segments[..2].iter().collect();
        let (_, batch_grads) =
            step_gradients(&config, &params, &batch, DropoutMode::Infer, None).unwrap();
        let (_, g0) =
            step_gradients(&config, &params, &batch[..1], DropoutMode::Infer, None).unwrap();
        let (_, g1) =
            step_gradients(&config, &params, &batch[1..], DropoutMode::Infer, None).unwrap();
        for ((bg, a), b) in batch_grads.iter().zip(&g0).zip(&g1) {
            for ((x, p), q) in bg.data().iter().zip(a.data()).zip(b.data()) {
                assert!((x - 0.5 * (p + q)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_location() {
        let mut set = synth_segments(20, 6, 3);
        // A target far outside f64 square range overflows the squared error.
        set.segments[0].y = Tensor::vector(vec![1e200; 3]).unwrap();
        let config = tiny_model();
        let train_config = TrainConfig {
            epochs: 1,
            batch_size: set.segments.len(),
            ..TrainConfig::default()
        };
        let err = train(&config, &train_config, &set, &empty_like(&set)).unwrap_err();
        match err {
            TrainError::Step { epoch, batch, .. } => {
                assert_eq!(epoch, 1);
                assert_eq!(batch, 0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_segments(30, 6, 3);
        let (train_set, val_set) = split_validation(&set, 0.2, 2, false).unwrap();
        let config = tiny_model();
        let train_config = TrainConfig {
            epochs: 2,
            seed: 13,
            ..TrainConfig::default()
        };
        let outcome = train(&config, &train_config, &train_set, &val_set).unwrap();
        let checkpoint =
            Checkpoint::new(config.clone(), train_config.clone(), None, &outcome);
        let path = dir.path().join("checkpoint.json");
        checkpoint.save(&path).unwrap();
        assert!(!dir.path().join("checkpoint.json.tmp").exists());

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, checkpoint);
        let params = loaded.final_params().unwrap();
        let segment = &set.segments[0];
        assert_eq!(
            crate::model::predict(&config, &params, segment).unwrap(),
            crate::model::predict(&config, &outcome.final_params, segment).unwrap()
        );
        assert_eq!(loaded.best_epoch, outcome.best_epoch);
    }

    #[test]
    fn checkpoint_load_rejects_corruption_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_segments(20, 6, 3);
        let config = tiny_model();
        let train_config = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let (train_set, val_set) = split_validation(&set, 0.2, 2, false).unwrap();
        let outcome = train(&config, &train_config, &train_set, &val_set).unwrap();
        let mut checkpoint = Checkpoint::new(config, train_config, None, &outcome);
        let path = dir.path().join("checkpoint.json");
        checkpoint.save(&path).unwrap();

        // Truncation: not valid JSON.
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(TrainError::Json { .. })));

        // Config mismatch: a different horizon no longer matches out_v.
        checkpoint.model_config.horizon = 4;
        checkpoint.save(&path).unwrap();
        assert!(Checkpoint::load(&path).is_err());
        checkpoint.model_config.horizon = 3;

        // Unsupported version.
        checkpoint.format_version = 99;
        checkpoint.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(TrainError::Checkpoint(_))
        ));
    }

    #[test]
    fn history_jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let history = TrainHistory {
            records: vec![
                EpochRecord {
                    epoch: 1,
                    steps: 4,
                    train_loss: 0.5,
                    val_loss: Some(0.6),
                    seconds: 0.01,
                },
                EpochRecord {
                    epoch: 2,
                    steps: 4,
                    train_loss: 0.25,
                    val_loss: None,
                    seconds: 0.01,
                },
            ],
        };
        let path = dir.path().join("history.jsonl");
        history.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: Vec<EpochRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, history.records);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        for bad in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                validation_fraction: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                beta1: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn test_provenance_never_reaches_training_stats() {
        // The training pipeline touches only segments it is given; mutating
        // data after the split boundary must not change the history.
        let spec = SynthSpec {
            length_days: 40,
            politics_shocks: vec![],
            disease_shocks: vec![],
            ..SynthSpec::default()
        };
        let frame = synth_generate(&spec).unwrap();
        let boundary = NaiveDate::from_ymd_opt(2010, 1, 30).unwrap();
        let boundary_idx = (boundary - frame.start_date()).num_days() as usize;
        let run = |frame: &crate::data::MultivariateFrame| {
            let (train_frame, _) = split_train_test(frame, boundary).unwrap();
            let scaler = Scaler::fit(&train_frame, boundary).unwrap();
            let scaled = scaler.apply(&train_frame).unwrap();
            let set = make_segments(&scaled, 6, 3, Provenance::Train).unwrap();
            let (tr, va) = split_validation(&set, 0.2, 1, false).unwrap();
            let config = tiny_model();
            let tc = TrainConfig {
                epochs: 2,
                seed: 21,
                ..TrainConfig::default()
            };
            train(&config, &tc, &tr, &va).unwrap().history.losses()
        };
        let base = run(&frame);
        let mutated = frame
            .map_values(|_, var| {
                let c = var.spec().channel_count;
                var.values()
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        if !var.spec().is_dummy() && j / c > boundary_idx {
                            v * 100.0 + 7.0
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .unwrap();
        assert_eq!(base, run(&mutated));
    }
}
