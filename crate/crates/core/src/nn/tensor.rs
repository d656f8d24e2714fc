use serde::{Deserialize, Serialize};

use super::{NnError, NnResult};

/// Dense 64-bit float array with shape metadata, stored row-major.
///
/// All numeric computation and gradient accumulation in this crate runs on
/// `Tensor` values. Construction rejects non-finite entries and length/shape
/// disagreements, so a `Tensor` in hand is always well formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Raw serialized form; deserialization funnels through [`Tensor::new`] so
/// persisted files cannot produce an invalid tensor.
#[derive(Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = NnError;

    fn try_from(repr: TensorRepr) -> Result<Self, Self::Error> {
        Tensor::new(repr.shape, repr.data)
    }
}

impl Tensor {
    /// Builds a tensor, validating that `data.len()` equals the shape product
    /// and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> NnResult<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(NnError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} values, got {}", shape, expected, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite { op: "Tensor::new" });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn scalar(value: f64) -> NnResult<Self> {
        Self::new(vec![], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> NnResult<Self> {
        let len = data.len();
        Self::new(vec![len], data)
    }

    /// 2-D tensor from `rows`×`cols` row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> NnResult<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a rank-0 or single-element tensor.
    pub fn item(&self) -> NnResult<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NnError::ShapeMismatch {
                op: "Tensor::item",
                detail: format!("expected a single element, shape is {:?}", self.shape),
            })
        }
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[row * self.shape[1] + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        debug_assert_eq!(self.rank(), 2);
        &mut self.data[row * self.shape[1] + col]
    }

    /// Elementwise in-place accumulation; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Checks every entry is finite, naming `op` in the error otherwise.
    pub fn ensure_finite(&self, op: &'static str) -> NnResult<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NnError::NonFinite { op })
        }
    }

    /// Largest absolute elementwise difference to `other`; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}
