//! Multiplicative log-normal augmentation of training segments.
//!
//! Each augmented copy of a segment draws one noise factor per variable,
//! multiplies every channel of that variable by it, and multiplies the
//! target window by the target variable's factor. Dummy variables are
//! exempt (their factor is pinned to 1), as is any variable whose pooled
//! variance is zero. Sampling is keyed by (seed, segment index, copy index)
//! so distinct segments can be augmented concurrently with results identical
//! to sequential execution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{Provenance, Segment, SegmentSet};
use crate::nn::{NnError, Tensor};

/// Default scale applied to a variable's variance to obtain the variance of
/// the log-noise: log ε ~ Normal(0, sigma_scale · v_i).
pub const DEFAULT_SIGMA_SCALE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("cannot derive a variance vector from an empty segment set")]
    EmptySet,
    #[error("variance must be >= 0 and finite, got {0}")]
    InvalidVariance(f64),
    #[error("sigma scale must be >= 0 and finite, got {0}")]
    InvalidSigmaScale(f64),
    #[error("noise factors must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("{0}")]
    Mismatch(String),
    #[error("test segments must never be augmented")]
    TestSet,
    #[error(transparent)]
    Tensor(#[from] NnError),
}

pub type AugmentResult<T> = Result<T, AugmentError>;

/// Pooled population variance per variable over every input value of every
/// segment (all channels of a variable pool together).
pub fn variance_vector(set: &SegmentSet) -> AugmentResult<Vec<f64>> {
    if set.is_empty() {
        return Err(AugmentError::EmptySet);
    }
    let n_vars = set.specs.len();
    let mut variances = Vec::with_capacity(n_vars);
    for var in 0..n_vars {
        // Welford's online update; the tests compare against a two-pass oracle.
        let mut count = 0.0f64;
        let mut mean = 0.0f64;
        let mut m2 = 0.0f64;
        for seg in &set.segments {
            for &x in seg.x[var].data() {
                count += 1.0;
                let delta = x - mean;
                mean += delta / count;
                m2 += delta * (x - mean);
            }
        }
        variances.push(m2 / count);
    }
    Ok(variances)
}

/// Draws one multiplicative noise factor: ε = exp(z) with
/// z ~ Normal(0, sigma_scale · v_i). Zero variance yields exactly 1 without
/// consuming randomness.
pub fn sample_epsilon<R: Rng>(v_i: f64, sigma_scale: f64, rng: &mut R) -> AugmentResult<f64> {
    if !(v_i.is_finite() && v_i >= 0.0) {
        return Err(AugmentError::InvalidVariance(v_i));
    }
    if !(sigma_scale.is_finite() && sigma_scale >= 0.0) {
        return Err(AugmentError::InvalidSigmaScale(sigma_scale));
    }
    let variance = sigma_scale * v_i;
    if variance == 0.0 {
        return Ok(1.0);
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite non-negative std");
    Ok(normal.sample(rng).exp())
}

/// Diagonal noise factors for one augmented copy: one ε per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMatrix {
    eps: Vec<f64>,
}

impl ErrorMatrix {
    pub fn new(eps: Vec<f64>) -> AugmentResult<Self> {
        if let Some(&bad) = eps.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            return Err(AugmentError::InvalidEpsilon(bad));
        }
        Ok(Self { eps })
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }
}

/// Per-variable noise distribution fitted to a training segment set.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    variances: Vec<f64>,
    dummy_mask: Vec<bool>,
    sigma_scale: f64,
    seed: u64,
}

impl NoiseModel {
    /// Fits variances on a raw training set (scaled space). Only train
    /// provenance is accepted: test data must stay untouched and an already
    /// augmented set would skew the variances.
    pub fn fit(set: &SegmentSet, sigma_scale: f64, seed: u64) -> AugmentResult<Self> {
        if set.provenance != Provenance::Train {
            return Err(AugmentError::Mismatch(format!(
                "noise model must be fitted on train segments, got {:?}",
                set.provenance
            )));
        }
        if !(sigma_scale.is_finite() && sigma_scale >= 0.0) {
            return Err(AugmentError::InvalidSigmaScale(sigma_scale));
        }
        Ok(Self {
            variances: variance_vector(set)?,
            dummy_mask: set.specs.iter().map(|s| s.is_dummy()).collect(),
            sigma_scale,
            seed,
        })
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Noise factors for copy `copy_index` of segment `segment_index`.
    /// Deterministic in (seed, segment index, copy index); dummy variables
    /// get exactly 1.
    pub fn error_matrix(&self, segment_index: usize, copy_index: usize) -> AugmentResult<ErrorMatrix> {
        let mut rng = copy_rng(self.seed, segment_index as u64, copy_index as u64);
        let eps = self
            .variances
            .iter()
            .zip(&self.dummy_mask)
            .map(|(&v, &dummy)| {
                if dummy {
                    Ok(1.0)
                } else {
                    sample_epsilon(v, self.sigma_scale, &mut rng)
                }
            })
            .collect::<AugmentResult<Vec<f64>>>()?;
        ErrorMatrix::new(eps)
    }
}

/// Independent generator per (seed, segment, copy). Each component passes
/// through splitmix64, a bijection, so distinct keys give distinct ChaCha
/// seeds while nearby integers land far apart.
fn copy_rng(seed: u64, segment: u64, copy: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&crate::util::splitmix64(seed).to_le_bytes());
    key[8..16].copy_from_slice(&crate::util::splitmix64(segment).to_le_bytes());
    key[16..24].copy_from_slice(&crate::util::splitmix64(copy).to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

/// Applies one error matrix: every channel of variable i is multiplied by
/// ε_i and the target window by ε_0 (the target variable's factor).
pub fn augment_segment(segment: &Segment, e: &ErrorMatrix) -> AugmentResult<Segment> {
    if e.eps.len() != segment.x.len() {
        return Err(AugmentError::Mismatch(format!(
            "error matrix covers {} variables, segment has {}",
            e.eps.len(),
            segment.x.len()
        )));
    }
    let x = segment
        .x
        .iter()
        .zip(&e.eps)
        .map(|(t, &eps)| {
            let mut scaled = t.clone();
            scaled.scale_in_place(eps);
            scaled.ensure_finite("augment_segment")?;
            Ok(scaled)
        })
        .collect::<AugmentResult<Vec<Tensor>>>()?;
    let mut y = segment.y.clone();
    y.scale_in_place(e.eps[0]);
    y.ensure_finite("augment_segment")?;
    Ok(Segment {
        t_index: segment.t_index,
        x,
        y,
    })
}

/// Expands a training set to the originals plus `factor` noised copies of
/// each segment: |out| = (factor + 1) · |in|. Originals come first, then all
/// segments' first copies, and so on; the originals are never modified.
pub fn augment_set(set: &SegmentSet, factor: usize, model: &NoiseModel) -> AugmentResult<SegmentSet> {
    if set.provenance == Provenance::Test {
        return Err(AugmentError::TestSet);
    }
    if model.variances.len() != set.specs.len() {
        return Err(AugmentError::Mismatch(format!(
            "noise model covers {} variables, segments have {}",
            model.variances.len(),
            set.specs.len()
        )));
    }
    let mut segments = Vec::with_capacity((factor + 1) * set.len());
    segments.extend(set.segments.iter().cloned());
    for copy in 0..factor {
        for (si, seg) in set.segments.iter().enumerate() {
            let e = model.error_matrix(si, copy)?;
            segments.push(augment_segment(seg, &e)?);
        }
    }
    Ok(SegmentSet {
        segments,
        m: set.m,
        k: set.k,
        provenance: if factor == 0 { set.provenance } else { Provenance::Augmented },
        specs: set.specs.clone(),
        start_date: set.start_date,
    })
}
