//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Values are stored flat in row-major order as `f64`. Every operation on a
//! [`Tape`] records a backward rule; a single call to [`Tape::backward`]
//! visits each recorded operation once, in reverse, and accumulates
//! gradients into the leaves.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, ops_suite, GradCheckReport};
pub use tape::{NodeId, Tape};

use crate::error::{CmrError, Result};

/// A dense n-dimensional value array. Shape is fixed at construction; all
/// tape operations produce new tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(CmrError::InvalidInput {
                op: "tensor",
                reason: format!("zero extent in shape {shape:?}"),
            });
        }
        if values.len() != numel {
            return Err(CmrError::InvalidInput {
                op: "tensor",
                reason: format!("{} values for shape {:?} ({} expected)", values.len(), shape, numel),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, values: vec![0.0; numel] }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![1], values: vec![x] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(CmrError::InvalidInput {
                op: "tensor",
                reason: "ragged rows".into(),
            });
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Element of a 2-d tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[row * self.shape[1] + col]
    }
}
