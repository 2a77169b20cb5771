//! Dense f64 tensors with reverse-mode differentiation on a tape.
//!
//! Tensors are plain (shape, values) pairs; a tensor is differentiable only
//! while it carries a node handle into the [`Tape`] that produced it. Tapes
//! are rebuilt for every forward pass and consumed by a single `backward`.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{AdamHyper, AdamState};
pub use gradcheck::{finite_difference_check, max_rel_error, GradCheckReport};
pub use tape::{CustomOp, GradientMap, NodeId, Tape};

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: String },
    #[error("log: input must be strictly positive")]
    LogDomain,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward needs a loss attached to the tape")]
    DetachedLoss,
    #[error("tape already consumed by backward")]
    TapeConsumed,
}

/// Dense row-major tensor. Rank 0 (shape `[]`) is a scalar with one value.
/// Values sit behind an `Arc` so tapes can hold them without copying.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let expected = element_count(&shape);
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new".into() });
        }
        Ok(Tensor {
            shape,
            values: Arc::new(values),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = element_count(&shape);
        Tensor {
            shape,
            values: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            values: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Scalar contents; panics if the tensor holds more than one value.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.values[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count for rank-2 tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.shape[1] + j]
    }

    /// Same values with no tape attachment; gradients do not flow past it.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    /// Mutable view of the values, copying only if a tape still shares them.
    pub(crate) fn values_make_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.values)
    }

    pub(crate) fn from_arc(shape: Vec<usize>, values: Arc<Vec<f64>>, node: Option<NodeId>) -> Self {
        Tensor {
            shape,
            values,
            node,
        }
    }
}

pub(crate) fn ensure_finite(op: &str, values: &[f64]) -> Result<(), TensorError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op: op.to_string() })
    }
}
