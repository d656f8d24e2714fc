//! The forecasting network: parallel per-variable causal-CNN heads, an
//! additive attention block over the concatenated latent features, and a
//! weight-normalized dense layer mapping to the forecast horizon.
//!
//! Ablation switches cover the variants used for comparison runs: attention
//! off (the context vector is dropped), weight normalization off (plain
//! dense output), and a single shared CNN over all stacked input channels
//! instead of per-variable heads.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Segment, SegmentSet};
use crate::nn::{DropoutMode, NnError, Tape, Tensor, Var};

/// Kernel size of the shared convolution in single-CNN mode.
const SINGLE_CNN_KERNEL_SIZE: usize = 5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("input does not match the model config: {0}")]
    InputMismatch(String),
    #[error("parameters do not match the model config: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// Architecture hyperparameters. The defaults give the full model:
/// a 30-day input window forecasting 30 days ahead over five variables
/// with channel counts [1, 1, 1, 4, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MhacConfig {
    /// Input window length m (days).
    pub input_window: usize,
    /// Forecast horizon k (days).
    pub horizon: usize,
    /// Input channels per variable, in frame order.
    pub head_channels: Vec<usize>,
    /// Latent channels each head produces.
    pub out_channels: usize,
    /// Per-head convolution kernel sizes, same order as `head_channels`.
    pub kernel_sizes: Vec<usize>,
    /// Convolution stride; only 1 preserves the window length.
    pub stride: usize,
    /// Causal max-pool window; 1 disables pooling.
    pub pool_size: usize,
    /// Attention projection width d_a.
    pub attention_dim: usize,
    /// Dropout rate on the feature vector entering the output layer.
    pub dropout_rate: f64,
    pub use_attention: bool,
    pub use_weightnorm: bool,
    pub single_cnn: bool,
}

impl Default for MhacConfig {
    fn default() -> Self {
        Self {
            input_window: 30,
            horizon: 30,
            head_channels: vec![1, 1, 1, 4, 1],
            out_channels: 4,
            kernel_sizes: vec![5, 3, 3, 3, 5],
            stride: 1,
            pool_size: 2,
            attention_dim: 20,
            dropout_rate: 0.25,
            use_attention: true,
            use_weightnorm: true,
            single_cnn: false,
        }
    }
}

impl MhacConfig {
    pub fn validate(&self) -> ModelResult<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.input_window == 0 || self.horizon == 0 {
            return fail("input_window and horizon must be >= 1".into());
        }
        if self.head_channels.is_empty() {
            return fail("at least one input variable is required".into());
        }
        if self.head_channels[0] != 1 {
            return fail("the first variable is the single-channel forecast target".into());
        }
        if self.head_channels.contains(&0) {
            return fail("head channel counts must be >= 1".into());
        }
        if self.kernel_sizes.len() != self.head_channels.len() {
            return fail(format!(
                "{} kernel sizes for {} variables",
                self.kernel_sizes.len(),
                self.head_channels.len()
            ));
        }
        if self.kernel_sizes.contains(&0) {
            return fail("kernel sizes must be >= 1".into());
        }
        if self.stride != 1 {
            return fail(format!(
                "stride {} is unsupported: only stride 1 preserves the window length",
                self.stride
            ));
        }
        if self.out_channels == 0 || self.pool_size == 0 || self.attention_dim == 0 {
            return fail("out_channels, pool_size and attention_dim must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Number of input variables.
    pub fn variable_count(&self) -> usize {
        self.head_channels.len()
    }

    /// Number of convolution heads (1 in single-CNN mode).
    pub fn head_count(&self) -> usize {
        if self.single_cnn {
            1
        } else {
            self.variable_count()
        }
    }

    /// Total input channels across variables.
    pub fn total_in_channels(&self) -> usize {
        self.head_channels.iter().sum()
    }

    /// Latent channel count C_total after all heads (single-CNN mode keeps
    /// the same width for equal capacity).
    pub fn total_channels(&self) -> usize {
        self.variable_count() * self.out_channels
    }

    /// Width of the context vector produced by attention.
    pub fn context_len(&self) -> usize {
        self.input_window * self.attention_dim
    }

    /// Width of the feature vector entering the output layer.
    pub fn feature_width(&self) -> usize {
        let z = self.input_window * self.total_channels();
        if self.use_attention {
            z + self.context_len()
        } else {
            z
        }
    }

    /// Fixed parameter layout: (name, shape) in recording order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut layout = Vec::new();
        if self.single_cnn {
            layout.push((
                "head_0_kernel".into(),
                vec![self.total_channels(), self.total_in_channels(), SINGLE_CNN_KERNEL_SIZE],
            ));
            layout.push(("head_0_bias".into(), vec![self.total_channels()]));
        } else {
            for (i, (&c_in, &ks)) in self.head_channels.iter().zip(&self.kernel_sizes).enumerate() {
                layout.push((format!("head_{i}_kernel"), vec![self.out_channels, c_in, ks]));
                layout.push((format!("head_{i}_bias"), vec![self.out_channels]));
            }
        }
        let (c_total, d_a, m) = (self.total_channels(), self.attention_dim, self.input_window);
        layout.push(("attn_query".into(), vec![c_total, d_a]));
        layout.push(("attn_key".into(), vec![c_total, d_a]));
        layout.push(("attn_value".into(), vec![c_total, d_a]));
        layout.push(("score_query".into(), vec![d_a, m]));
        layout.push(("score_key".into(), vec![d_a, m]));
        layout.push(("score_bias".into(), vec![m]));
        layout.push(("out_v".into(), vec![self.horizon, self.feature_width()]));
        layout.push(("out_g".into(), vec![self.horizon]));
        layout.push(("out_bias".into(), vec![self.horizon]));
        layout
    }
}

/// All trainable tensors. Attention parameters exist even when attention is
/// ablated so that dead-path invariance is directly testable; they simply
/// receive no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct MhacParams {
    pub head_kernels: Vec<Tensor>,
    pub head_biases: Vec<Tensor>,
    pub attn_query: Tensor,
    pub attn_key: Tensor,
    pub attn_value: Tensor,
    pub score_query: Tensor,
    pub score_key: Tensor,
    pub score_bias: Tensor,
    pub out_v: Tensor,
    pub out_g: Tensor,
    pub out_bias: Tensor,
}

impl MhacParams {
    /// Tensors in the fixed layout order of [`MhacConfig::param_layout`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (k, b) in self.head_kernels.iter().zip(&self.head_biases) {
            out.push(k);
            out.push(b);
        }
        out.extend([
            &self.attn_query,
            &self.attn_key,
            &self.attn_value,
            &self.score_query,
            &self.score_key,
            &self.score_bias,
            &self.out_v,
            &self.out_g,
            &self.out_bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for (k, b) in self.head_kernels.iter_mut().zip(self.head_biases.iter_mut()) {
            out.push(k);
            out.push(b);
        }
        out.extend([
            &mut self.attn_query,
            &mut self.attn_key,
            &mut self.attn_value,
            &mut self.score_query,
            &mut self.score_key,
            &mut self.score_bias,
            &mut self.out_v,
            &mut self.out_g,
            &mut self.out_bias,
        ]);
        out
    }

    /// Checks every tensor's shape against the config's layout.
    pub fn validate(&self, config: &MhacConfig) -> ModelResult<()> {
        let layout = config.param_layout();
        let tensors = self.tensors();
        if tensors.len() != layout.len() {
            return Err(ModelError::ParamMismatch(format!(
                "{} tensors, config expects {}",
                tensors.len(),
                layout.len()
            )));
        }
        for ((name, shape), tensor) in layout.iter().zip(tensors) {
            if tensor.shape() != shape.as_slice() {
                return Err(ModelError::ParamMismatch(format!(
                    "tensor '{name}' has shape {:?}, config expects {:?}",
                    tensor.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds params from (name, tensor) pairs, validating names and shapes.
    pub fn from_named(config: &MhacConfig, mut named: std::collections::BTreeMap<String, Tensor>) -> ModelResult<Self> {
        let layout = config.param_layout();
        let mut ordered = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let tensor = named.remove(name).ok_or_else(|| {
                ModelError::ParamMismatch(format!("missing tensor '{name}'"))
            })?;
            if tensor.shape() != shape.as_slice() {
                return Err(ModelError::ParamMismatch(format!(
                    "tensor '{name}' has shape {:?}, config expects {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            ordered.push(tensor);
        }
        if let Some(extra) = named.keys().next() {
            return Err(ModelError::ParamMismatch(format!("unexpected tensor '{extra}'")));
        }
        Self::from_ordered(config, ordered)
    }

    fn from_ordered(config: &MhacConfig, mut ordered: Vec<Tensor>) -> ModelResult<Self> {
        let heads = config.head_count();
        if ordered.len() != 2 * heads + 9 {
            return Err(ModelError::ParamMismatch(format!(
                "{} tensors, config expects {}",
                ordered.len(),
                2 * heads + 9
            )));
        }
        let tail: Vec<Tensor> = ordered.split_off(2 * heads);
        let mut head_kernels = Vec::with_capacity(heads);
        let mut head_biases = Vec::with_capacity(heads);
        for pair in ordered.chunks(2) {
            head_kernels.push(pair[0].clone());
            head_biases.push(pair[1].clone());
        }
        let mut tail = tail.into_iter();
        let params = Self {
            head_kernels,
            head_biases,
            attn_query: tail.next().expect("length checked"),
            attn_key: tail.next().expect("length checked"),
            attn_value: tail.next().expect("length checked"),
            score_query: tail.next().expect("length checked"),
            score_key: tail.next().expect("length checked"),
            score_bias: tail.next().expect("length checked"),
            out_v: tail.next().expect("length checked"),
            out_g: tail.next().expect("length checked"),
            out_bias: tail.next().expect("length checked"),
        };
        params.validate(config)?;
        Ok(params)
    }
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_tensor<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 2.0 * bound - bound).collect();
    Tensor::new(shape, data).expect("uniform values are finite")
}

/// Initializes parameters: weights ~ Uniform(−a, a) with
/// a = sqrt(6 / (fan_in + fan_out)), biases zero, and weight-norm gains set
/// to the row norms of v so the initial output layer equals its plain-dense
/// counterpart.
pub fn init_params<R: Rng>(config: &MhacConfig, rng: &mut R) -> ModelResult<MhacParams> {
    config.validate()?;
    let mut head_kernels = Vec::new();
    let mut head_biases = Vec::new();
    for (name, shape) in config.param_layout() {
        if name.ends_with("_kernel") {
            let (c_out, c_in, ks) = (shape[0], shape[1], shape[2]);
            let bound = xavier_bound(c_in * ks, c_out * ks);
            head_kernels.push(uniform_tensor(shape, bound, rng));
        } else if name.ends_with("_bias") && name.starts_with("head_") {
            head_biases.push(Tensor::zeros(shape));
        }
    }
    let (c_total, d_a, m) = (config.total_channels(), config.attention_dim, config.input_window);
    let attn_bound = xavier_bound(c_total, d_a);
    let attn_query = uniform_tensor(vec![c_total, d_a], attn_bound, rng);
    let attn_key = uniform_tensor(vec![c_total, d_a], attn_bound, rng);
    let attn_value = uniform_tensor(vec![c_total, d_a], attn_bound, rng);
    let score_bound = xavier_bound(d_a, m);
    let score_query = uniform_tensor(vec![d_a, m], score_bound, rng);
    let score_key = uniform_tensor(vec![d_a, m], score_bound, rng);
    let score_bias = Tensor::zeros(vec![m]);
    let d_in = config.feature_width();
    let out_bound = xavier_bound(d_in, config.horizon);
    let out_v = uniform_tensor(vec![config.horizon, d_in], out_bound, rng);
    let out_g = Tensor::vector(
        (0..config.horizon)
            .map(|j| {
                out_v.data()[j * d_in..(j + 1) * d_in]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect(),
    )
    .expect("norms are finite");
    let out_bias = Tensor::zeros(vec![config.horizon]);
    let params = MhacParams {
        head_kernels,
        head_biases,
        attn_query,
        attn_key,
        attn_value,
        score_query,
        score_key,
        score_bias,
        out_v,
        out_g,
        out_bias,
    };
    params.validate(config)?;
    Ok(params)
}

/// Tape handles for one recording of the parameters.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub head_kernels: Vec<Var>,
    pub head_biases: Vec<Var>,
    pub attn_query: Var,
    pub attn_key: Var,
    pub attn_value: Var,
    pub score_query: Var,
    pub score_key: Var,
    pub score_bias: Var,
    pub out_v: Var,
    pub out_g: Var,
    pub out_bias: Var,
}

impl ParamVars {
    pub fn record(tape: &mut Tape, params: &MhacParams) -> Self {
        let vars: Vec<Var> = params.tensors().into_iter().map(|t| tape.input(t.clone())).collect();
        Self::from_vars(params.head_kernels.len(), &vars)
    }

    /// Reassembles the structure from vars laid out in
    /// [`MhacConfig::param_layout`] order.
    pub fn from_vars(head_count: usize, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 2 * head_count + 9, "wrong parameter count");
        let mut head_kernels = Vec::with_capacity(head_count);
        let mut head_biases = Vec::with_capacity(head_count);
        for i in 0..head_count {
            head_kernels.push(vars[2 * i]);
            head_biases.push(vars[2 * i + 1]);
        }
        let rest = &vars[2 * head_count..];
        Self {
            head_kernels,
            head_biases,
            attn_query: rest[0],
            attn_key: rest[1],
            attn_value: rest[2],
            score_query: rest[3],
            score_key: rest[4],
            score_bias: rest[5],
            out_v: rest[6],
            out_g: rest[7],
            out_bias: rest[8],
        }
    }

    /// Vars in layout order, aligned with [`MhacParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (k, b) in self.head_kernels.iter().zip(&self.head_biases) {
            out.push(*k);
            out.push(*b);
        }
        out.extend([
            self.attn_query,
            self.attn_key,
            self.attn_value,
            self.score_query,
            self.score_key,
            self.score_bias,
            self.out_v,
            self.out_g,
            self.out_bias,
        ]);
        out
    }
}

/// Handles to the intermediate values of one forward pass, for shape probes
/// and diagnostics.
pub struct ForwardTrace {
    /// Latent features, input_window × total_channels.
    pub z: Var,
    /// Attention score matrix (input_window × input_window); None when
    /// attention is ablated.
    pub score: Option<Var>,
    /// Flattened context vector; None when attention is ablated.
    pub context: Option<Var>,
    /// Feature vector entering the output layer (after dropout).
    pub feature: Var,
    /// Forecast, length horizon.
    pub output: Var,
}

fn check_inputs(tape: &Tape, config: &MhacConfig, x: &[Var]) -> ModelResult<()> {
    if x.len() != config.variable_count() {
        return Err(ModelError::InputMismatch(format!(
            "{} input variables, config expects {}",
            x.len(),
            config.variable_count()
        )));
    }
    for (i, (&var, &channels)) in x.iter().zip(&config.head_channels).enumerate() {
        let shape = tape.value(var).shape();
        if shape != [channels, config.input_window] {
            return Err(ModelError::InputMismatch(format!(
                "variable {i} has shape {shape:?}, config expects [{channels}, {}]",
                config.input_window
            )));
        }
    }
    Ok(())
}

/// Per-variable feature extraction: causal conv → ReLU → causal max-pool per
/// head, head outputs transposed to time-major and concatenated on the
/// channel axis into input_window × total_channels. In single-CNN mode one
/// shared convolution runs over all stacked input channels.
pub fn extract_features(
    tape: &mut Tape,
    config: &MhacConfig,
    vars: &ParamVars,
    x: &[Var],
) -> ModelResult<Var> {
    check_inputs(tape, config, x)?;
    let head_outputs: Vec<Var> = if config.single_cnn {
        // Stack variables into one (total_in_channels × m) input.
        let time_major: Vec<Var> = x
            .iter()
            .map(|&v| tape.transpose(v))
            .collect::<Result<_, _>>()?;
        let stacked_t = tape.concat_cols(&time_major)?;
        let stacked = tape.transpose(stacked_t)?;
        let conv = tape.causal_conv1d(stacked, vars.head_kernels[0], vars.head_biases[0])?;
        let act = tape.relu(conv)?;
        let pooled = tape.maxpool1d_same(act, config.pool_size)?;
        vec![tape.transpose(pooled)?]
    } else {
        let mut outputs = Vec::with_capacity(x.len());
        for (i, &xi) in x.iter().enumerate() {
            let conv = tape.causal_conv1d(xi, vars.head_kernels[i], vars.head_biases[i])?;
            let act = tape.relu(conv)?;
            let pooled = tape.maxpool1d_same(act, config.pool_size)?;
            outputs.push(tape.transpose(pooled)?);
        }
        outputs
    };
    let z = if head_outputs.len() == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)?
    };
    debug_assert_eq!(
        tape.value(z).shape(),
        &[config.input_window, config.total_channels()]
    );
    Ok(z)
}

/// Additive attention over the latent features: Q, K, V projections of Z,
/// Score = tanh(Q·W′_q + K·W′_k + b), A = row softmax, context = flatten(A·V).
/// Returns (score, context).
pub fn attention(
    tape: &mut Tape,
    config: &MhacConfig,
    vars: &ParamVars,
    z: Var,
) -> ModelResult<(Var, Var)> {
    let q = tape.matmul(z, vars.attn_query)?;
    let k = tape.matmul(z, vars.attn_key)?;
    let v = tape.matmul(z, vars.attn_value)?;
    let q_score = tape.matmul(q, vars.score_query)?;
    let k_score = tape.matmul(k, vars.score_key)?;
    let sum = tape.add(q_score, k_score)?;
    let shifted = tape.add_row_broadcast(sum, vars.score_bias)?;
    let score = tape.tanh(shifted)?;
    let weights = tape.softmax_rows(score)?;
    let mixed = tape.matmul(weights, v)?;
    let context = tape.flatten(mixed)?;
    debug_assert_eq!(
        tape.value(score).shape(),
        &[config.input_window, config.input_window]
    );
    debug_assert_eq!(tape.value(context).len(), config.context_len());
    Ok((score, context))
}

/// Full forward pass, exposing intermediates. `dropout_rng` is required in
/// train mode when the dropout rate is positive.
pub fn forward_trace(
    tape: &mut Tape,
    config: &MhacConfig,
    vars: &ParamVars,
    x: &[Var],
    mode: DropoutMode,
    dropout_rng: Option<&mut ChaCha12Rng>,
) -> ModelResult<ForwardTrace> {
    let z = extract_features(tape, config, vars, x)?;
    let flat_z = tape.flatten(z)?;
    let (score, context, feature_pre) = if config.use_attention {
        let (score, context) = attention(tape, config, vars, z)?;
        (Some(score), Some(context), tape.concat_vec(&[flat_z, context])?)
    } else {
        (None, None, flat_z)
    };
    debug_assert_eq!(tape.value(feature_pre).len(), config.feature_width());
    let feature = if mode == DropoutMode::Train && config.dropout_rate > 0.0 {
        let rng = dropout_rng.ok_or_else(|| {
            ModelError::Config("train-mode forward with dropout needs an rng".into())
        })?;
        tape.dropout(feature_pre, config.dropout_rate, mode, rng)?
    } else {
        feature_pre
    };
    let output = if config.use_weightnorm {
        tape.dense_weightnorm(feature, vars.out_v, vars.out_g, vars.out_bias)?
    } else {
        tape.dense(feature, vars.out_v, vars.out_bias)?
    };
    debug_assert_eq!(tape.value(output).len(), config.horizon);
    Ok(ForwardTrace {
        z,
        score,
        context,
        feature,
        output,
    })
}

/// Forward pass returning just the forecast handle.
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &MhacConfig,
    vars: &ParamVars,
    x: &[Var],
    mode: DropoutMode,
    dropout_rng: Option<&mut ChaCha12Rng>,
) -> ModelResult<Var> {
    forward_trace(tape, config, vars, x, mode, dropout_rng).map(|t| t.output)
}

/// Inference on one segment: scaled-space forecast of length horizon.
pub fn predict(config: &MhacConfig, params: &MhacParams, segment: &Segment) -> ModelResult<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, params);
    let x: Vec<Var> = segment.x.iter().map(|t| tape.input(t.clone())).collect();
    let out = forward_on_tape(&mut tape, config, &vars, &x, DropoutMode::Infer, None)?;
    Ok(tape.value(out).data().to_vec())
}

pub(crate) fn check_segments(config: &MhacConfig, set: &SegmentSet) -> ModelResult<()> {
    if set.m != config.input_window || set.k != config.horizon {
        return Err(ModelError::InputMismatch(format!(
            "segments use m={}, k={}, config expects m={}, k={}",
            set.m, set.k, config.input_window, config.horizon
        )));
    }
    let channels: Vec<usize> = set.specs.iter().map(|s| s.channel_count).collect();
    if channels != config.head_channels {
        return Err(ModelError::InputMismatch(format!(
            "segment channels {channels:?}, config expects {:?}",
            config.head_channels
        )));
    }
    Ok(())
}

/// Inference over a whole segment set: row s is the forecast for segment s.
pub fn predict_batch(
    config: &MhacConfig,
    params: &MhacParams,
    set: &SegmentSet,
) -> ModelResult<Vec<Vec<f64>>> {
    params.validate(config)?;
    check_segments(config, set)?;
    set.segments.iter().map(|seg| predict(config, params, seg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;

    fn tiny_config() -> MhacConfig {
        MhacConfig {
            input_window: 6,
            horizon: 3,
            head_channels: vec![1, 1, 1, 4, 1],
            out_channels: 2,
            kernel_sizes: vec![3, 2, 2, 2, 3],
            pool_size: 2,
            attention_dim: 4,
            dropout_rate: 0.25,
            ..MhacConfig::default()
        }
    }

    fn random_inputs(config: &MhacConfig, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        config
            .head_channels
            .iter()
            .map(|&c| {
                let data: Vec<f64> = (0..c * config.input_window)
                    .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                    .collect();
                Tensor::matrix(c, config.input_window, data).unwrap()
            })
            .collect()
    }

    fn run_infer(config: &MhacConfig, params: &MhacParams, inputs: &[Tensor]) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, params);
        let x: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = forward_on_tape(&mut tape, config, &vars, &x, DropoutMode::Infer, None).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn default_widths() {
        let config = MhacConfig::default();
        assert_eq!(config.total_channels(), 20);
        assert_eq!(config.context_len(), 600);
        assert_eq!(config.feature_width(), 1200);
        assert_eq!(config.total_in_channels(), 8);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let config = tiny_config();
        let a = init_params(&config, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        let b = init_params(&config, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let c = init_params(&config, &mut ChaCha12Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a, c);
        let d_in = config.feature_width();
        let bound = xavier_bound(d_in, config.horizon);
        assert!(a.out_v.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn init_gains_equal_row_norms() {
        let config = tiny_config();
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        let d_in = config.feature_width();
        for j in 0..config.horizon {
            let norm = params.out_v.data()[j * d_in..(j + 1) * d_in]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!((params.out_g.data()[j] - norm).abs() < 1e-12);
        }
        // With g = ||v_j|| the weight-normalized layer is the plain layer.
        let inputs = random_inputs(&config, 1);
        let with_wn = run_infer(&config, &params, &inputs);
        let mut plain_cfg = config.clone();
        plain_cfg.use_weightnorm = false;
        let plain = run_infer(&plain_cfg, &params, &inputs);
        for (a, b) in with_wn.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_chain_matches_documented_widths() {
        let config = tiny_config();
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(2)).unwrap();
        let inputs = random_inputs(&config, 3);
        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, &params);
        let x: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let trace =
            forward_trace(&mut tape, &config, &vars, &x, DropoutMode::Infer, None).unwrap();
        assert_eq!(tape.value(trace.z).shape(), &[6, 10]);
        assert_eq!(tape.value(trace.score.unwrap()).shape(), &[6, 6]);
        assert_eq!(tape.value(trace.context.unwrap()).shape(), &[24]);
        assert_eq!(tape.value(trace.feature).shape(), &[84]);
        assert_eq!(tape.value(trace.output).shape(), &[3]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_latents_and_bias_output() {
        let config = tiny_config();
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(4)).unwrap();
        let zeros: Vec<Tensor> = config
            .head_channels
            .iter()
            .map(|&c| Tensor::zeros(vec![c, config.input_window]))
            .collect();
        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, &params);
        let x: Vec<Var> = zeros.iter().map(|t| tape.input(t.clone())).collect();
        let trace =
            forward_trace(&mut tape, &config, &vars, &x, DropoutMode::Infer, None).unwrap();
        assert!(tape.value(trace.z).data().iter().all(|v| *v == 0.0));
        // Zero Z makes V zero, so the context is zero and the forecast
        // reduces to the output bias (zero at init).
        assert!(tape.value(trace.context.unwrap()).data().iter().all(|v| *v == 0.0));
        assert!(tape.value(trace.output).data().iter().all(|v| *v == 0.0));
        // Attention weights stay a valid distribution: uniform rows.
        let score = tape.value(trace.score.unwrap());
        assert!(score.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heads_are_independent_across_variables() {
        let config = tiny_config();
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(7)).unwrap();
        let inputs = random_inputs(&config, 8);
        let mut changed = inputs.clone();
        changed[2] = Tensor::matrix(
            1,
            config.input_window,
            vec![9.0; config.input_window],
        )
        .unwrap();

        let z_of = |ins: &[Tensor]| {
            let mut tape = Tape::new();
            let vars = ParamVars::record(&mut tape, &params);
            let x: Vec<Var> = ins.iter().map(|t| tape.input(t.clone())).collect();
            let z = extract_features(&mut tape, &config, &vars, &x).unwrap();
            tape.value(z).clone()
        };
        let za = z_of(&inputs);
        let zb = z_of(&changed);
        let c = config.out_channels;
        for t in 0..config.input_window {
            for head in 0..config.variable_count() {
                for ch in 0..c {
                    let col = head * c + ch;
                    let same = za.at(t, col) == zb.at(t, col);
                    if head == 2 {
                        continue; // the changed head may move
                    }
                    assert!(same, "head {head} changed at ({t}, {ch})");
                }
            }
        }
        assert_ne!(za, zb);
    }

    #[test]
    fn attention_matches_dense_algebra_oracle() {
        // m=3, C_total=2, d_a=2 toy, parameters and input set by hand.
        let config = MhacConfig {
            input_window: 3,
            horizon: 2,
            head_channels: vec![1],
            out_channels: 2,
            kernel_sizes: vec![2],
            pool_size: 1,
            attention_dim: 2,
            ..MhacConfig::default()
        };
        let z_data = [0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        let wq = [0.3, -0.2, 0.1, 0.4];
        let wk = [-0.5, 0.2, 0.3, -0.1];
        let wv = [0.7, 0.1, -0.3, 0.2];
        let wq2 = [0.2, -0.1, 0.05, 0.3, -0.2, 0.15];
        let wk2 = [-0.25, 0.1, 0.2, 0.05, -0.15, 0.3];
        let bias = [0.1, -0.2, 0.05];

        let mut params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(0)).unwrap();
        params.attn_query = Tensor::matrix(2, 2, wq.to_vec()).unwrap();
        params.attn_key = Tensor::matrix(2, 2, wk.to_vec()).unwrap();
        params.attn_value = Tensor::matrix(2, 2, wv.to_vec()).unwrap();
        params.score_query = Tensor::matrix(2, 3, wq2.to_vec()).unwrap();
        params.score_key = Tensor::matrix(2, 3, wk2.to_vec()).unwrap();
        params.score_bias = Tensor::vector(bias.to_vec()).unwrap();

        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, &params);
        let z = tape.input(Tensor::matrix(3, 2, z_data.to_vec()).unwrap());
        let (_, context) = attention(&mut tape, &config, &vars, z).unwrap();
        let got = tape.value(context).data().to_vec();

        // Oracle: straightforward nested-loop matrix algebra.
        let matmul = |a: &[f64], b: &[f64], r: usize, s: usize, c: usize| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    for k in 0..s {
                        out[i * c + j] += a[i * s + k] * b[k * c + j];
                    }
                }
            }
            out
        };
        let q = matmul(&z_data, &wq, 3, 2, 2);
        let k = matmul(&z_data, &wk, 3, 2, 2);
        let v = matmul(&z_data, &wv, 3, 2, 2);
        let qs = matmul(&q, &wq2, 3, 2, 3);
        let ks = matmul(&k, &wk2, 3, 2, 3);
        let mut score = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                score[i * 3 + j] = (qs[i * 3 + j] + ks[i * 3 + j] + bias[j]).tanh();
            }
        }
        let mut weights = vec![0.0; 9];
        for i in 0..3 {
            let row = &score[i * 3..(i + 1) * 3];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..3 {
                weights[i * 3 + j] = exps[j] / sum;
            }
        }
        let expected = matmul(&weights, &v, 3, 3, 2);
        assert_eq!(got.len(), expected.len());
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn infer_mode_is_deterministic() {
        let config = tiny_config();
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(20)).unwrap();
        let inputs = random_inputs(&config, 21);
        assert_eq!(run_infer(&config, &params, &inputs), run_infer(&config, &params, &inputs));
    }

    #[test]
    fn attention_off_ignores_attention_params() {
        let mut config = tiny_config();
        config.use_attention = false;
        let mut params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        let inputs = random_inputs(&config, 10);
        let before = run_infer(&config, &params, &inputs);
        // Perturb the dead path hard.
        params.attn_query.scale_in_place(100.0);
        params.attn_key.scale_in_place(-50.0);
        params.attn_value.scale_in_place(3.0);
        params.score_bias = Tensor::vector(vec![5.0; config.input_window]).unwrap();
        let after = run_infer(&config, &params, &inputs);
        assert_eq!(before, after);
    }

    #[test]
    fn attention_off_narrows_feature_and_out_v() {
        let mut config = tiny_config();
        config.use_attention = false;
        assert_eq!(config.feature_width(), 60);
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        assert_eq!(params.out_v.shape(), &[3, 60]);
    }

    #[test]
    fn weightnorm_row_rescaling_leaves_forecast_unchanged() {
        let config = tiny_config();
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(12)).unwrap();
        let inputs = random_inputs(&config, 13);
        let base = run_infer(&config, &params, &inputs);
        for c in [0.5, 3.0] {
            let mut scaled = params.clone();
            let d_in = config.feature_width();
            // Scale one row of v; weight normalization must cancel it.
            for w in &mut scaled.out_v.data_mut()[d_in..2 * d_in] {
                *w *= c;
            }
            let out = run_infer(&config, &scaled, &inputs);
            for (a, b) in base.iter().zip(&out) {
                let rel = (a - b).abs() / a.abs().max(1e-12);
                assert!(rel < 1e-9, "c={c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn single_cnn_mode_keeps_widths_and_runs() {
        let mut config = tiny_config();
        config.single_cnn = true;
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(30)).unwrap();
        assert_eq!(params.head_kernels.len(), 1);
        assert_eq!(params.head_kernels[0].shape(), &[10, 8, 5]);
        let inputs = random_inputs(&config, 31);
        let out = run_infer(&config, &params, &inputs);
        assert_eq!(out.len(), config.horizon);
    }

    #[test]
    fn head_gradients_are_local_with_attention_off() {
        let mut config = tiny_config();
        config.use_attention = false;
        let mut params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(14)).unwrap();
        // Positive head biases keep ReLU active so gradients can flow.
        for b in &mut params.head_biases {
            *b = Tensor::vector(vec![1.0; config.out_channels]).unwrap();
        }
        let inputs = random_inputs(&config, 15);
        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, &params);
        let x: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let z = extract_features(&mut tape, &config, &vars, &x).unwrap();
        let flat = tape.flatten(z).unwrap();
        // Loss reads only head 1's channel block: target differs from the
        // current value exactly there, so gradients elsewhere vanish.
        let value = tape.value(flat).clone();
        let (m, c_total, c) = (config.input_window, config.total_channels(), config.out_channels);
        let mut target = value.data().to_vec();
        for t in 0..m {
            for ch in 0..c {
                target[t * c_total + c + ch] += 1.0;
            }
        }
        let target = Tensor::vector(target).unwrap();
        let loss = tape.mse_against(flat, &target).unwrap();
        let grads = tape.backward(loss).unwrap();
        for head in 0..config.variable_count() {
            let kernel_grad = grads.wrt(vars.head_kernels[head]);
            let bias_grad = grads.wrt(vars.head_biases[head]);
            if head == 1 {
                assert!(bias_grad.data().iter().any(|g| *g != 0.0));
            } else {
                assert!(kernel_grad.data().iter().all(|g| *g == 0.0), "head {head}");
                assert!(bias_grad.data().iter().all(|g| *g == 0.0), "head {head}");
            }
        }
    }

    #[test]
    fn full_network_passes_grad_check_on_tiny_config() {
        let config = MhacConfig {
            input_window: 6,
            horizon: 3,
            head_channels: vec![1, 1, 4],
            out_channels: 2,
            kernel_sizes: vec![3, 2, 2],
            pool_size: 2,
            attention_dim: 4,
            dropout_rate: 0.0,
            ..MhacConfig::default()
        };
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(40)).unwrap();
        let inputs = random_inputs(&config, 41);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let truth = Tensor::vector(
            (0..config.horizon).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let heads = config.head_count();
        let err = grad_check(
            |tape, vars| {
                let pv = ParamVars::from_vars(heads, vars);
                let x: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
                let out = forward_on_tape(tape, &config, &pv, &x, DropoutMode::Infer, None)
                    .map_err(|e| match e {
                        ModelError::Nn(inner) => inner,
                        other => crate::nn::NnError::InvalidArgument {
                            op: "forward",
                            detail: other.to_string(),
                        },
                    })?;
                tape.mse_against(out, &truth)
            },
            &tensors,
            crate::nn::DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn predict_batch_equals_individual_forwards() {
        use crate::data::{Provenance, VariableSpec};
        let config = MhacConfig {
            input_window: 4,
            horizon: 2,
            head_channels: vec![1, 1],
            out_channels: 2,
            kernel_sizes: vec![2, 2],
            pool_size: 2,
            attention_dim: 3,
            ..MhacConfig::default()
        };
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(50)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(51);
        let segments: Vec<Segment> = (0..3)
            .map(|i| Segment {
                t_index: 3 + i,
                x: (0..2)
                    .map(|_| {
                        Tensor::matrix(
                            1,
                            4,
                            (0..4).map(|_| rng.random::<f64>() - 0.5).collect(),
                        )
                        .unwrap()
                    })
                    .collect(),
                y: Tensor::vector(vec![0.0, 0.0]).unwrap(),
            })
            .collect();
        let set = SegmentSet {
            segments: segments.clone(),
            m: 4,
            k: 2,
            provenance: Provenance::Test,
            specs: vec![VariableSpec::numeric("entrant"), VariableSpec::numeric("attraction")],
            start_date: "2010-01-01".parse().unwrap(),
        };
        let batch = predict_batch(&config, &params, &set).unwrap();
        assert_eq!(batch.len(), 3);
        for (row, seg) in batch.iter().zip(&segments) {
            assert_eq!(row, &predict(&config, &params, seg).unwrap());
        }
        let empty = SegmentSet {
            segments: vec![],
            ..set
        };
        assert!(predict_batch(&config, &params, &empty).unwrap().is_empty());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let broken: [MhacConfig; 4] = [
            MhacConfig { stride: 2, ..MhacConfig::default() },
            MhacConfig { kernel_sizes: vec![5, 3], ..MhacConfig::default() },
            MhacConfig { dropout_rate: 1.0, ..MhacConfig::default() },
            MhacConfig { head_channels: vec![2, 1], ..MhacConfig::default() },
        ];
        for config in broken {
            assert!(config.validate().is_err());
        }
    }

    #[test]
    fn params_round_trip_through_named_map() {
        let config = tiny_config();
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(60)).unwrap();
        let named: std::collections::BTreeMap<String, Tensor> = config
            .param_layout()
            .into_iter()
            .map(|(name, _)| name)
            .zip(params.tensors().into_iter().cloned())
            .collect();
        let back = MhacParams::from_named(&config, named).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn from_named_rejects_wrong_shape_and_missing() {
        let config = tiny_config();
        let params = init_params(&config, &mut ChaCha12Rng::seed_from_u64(61)).unwrap();
        let mut named: std::collections::BTreeMap<String, Tensor> = config
            .param_layout()
            .into_iter()
            .map(|(name, _)| name)
            .zip(params.tensors().into_iter().cloned())
            .collect();
        named.insert("out_g".into(), Tensor::vector(vec![1.0]).unwrap());
        assert!(MhacParams::from_named(&config, named.clone()).is_err());
        named.remove("out_g");
        assert!(MhacParams::from_named(&config, named).is_err());
    }
}
