//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable, row-major `f64` array with shape metadata.
//! [`Graph`] records operations define-by-run style; [`Graph::backward`]
//! walks the recorded tape in reverse and produces a gradient for every
//! parameter leaf. [`gradcheck`] verifies any recorded computation against
//! central finite differences.
//!
//! Values are immutable after construction and ops are pure, so tensors can
//! be shared freely across threads. A graph instance is single-threaded:
//! it is built, differentiated and dropped within one training step.

mod graph;
mod kernels;

pub mod gradcheck;

pub use graph::{Gradients, Graph, Var};
pub(crate) use kernels::argmax_row;

use std::sync::Arc;

use thiserror::Error;

/// Errors produced by tensor construction and tensor ops.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: dimensions must be positive and their product must equal the data length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value (NaN/Inf is an error condition, never a silent value)")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

/// Dense n-dimensional array of `f64`, row-major, immutable after construction.
///
/// Cloning is cheap: the flat buffer is shared behind an [`Arc`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a shape and flat row-major data.
    ///
    /// Every dimension must be positive and the element count must match.
    /// A rank-0 shape (`[]`) denotes a scalar with exactly one element.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// A scalar (rank-0) tensor.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    /// A tensor of zeros.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![0.0; numel]),
        }
    }

    /// A tensor filled with `value`.
    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a scalar tensor.
    ///
    /// Panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Element at a fully-specified multi-index (row-major).
    ///
    /// Panics on rank or bounds violations; intended for tests and oracles,
    /// not hot paths.
    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Same data viewed under a new shape with an identical element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.numel() {
            return Err(TensorError::InvalidShape {
                shape,
                len: self.numel(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bit-exact equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_zero_dims_and_length_mismatch() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(4.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.5);
    }

    #[test]
    fn get_indexes_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
        assert_eq!(t.get(&[0, 0]), 0.0);
        assert_eq!(t.get(&[0, 2]), 2.0);
        assert_eq!(t.get(&[1, 0]), 3.0);
        assert_eq!(t.get(&[1, 2]), 5.0);
    }

    #[test]
    fn reshape_preserves_data_and_checks_count() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }
}
