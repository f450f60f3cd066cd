//! Small neural-network core: dense and recurrent layers with hand-written
//! backpropagation, MAE loss, the Nadam optimizer, Glorot initialization,
//! finite-difference gradient checking and a binary tensor container.

#![allow(clippy::needless_range_loop)]

mod dense;
mod gradcheck;
mod init;
mod loss;
mod matrix;
mod nadam;
mod recurrent;
mod tensors;

pub use dense::{dense_forward, Activation, DenseLayer};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use init::{init_params, InitScheme};
pub use loss::mae_loss;
pub use matrix::{accurate_dot, accurate_sum, axpy, dot, Matrix};
pub use nadam::{NadamConfig, NadamState};
pub use recurrent::{rnn_forward, CellKind, GruCell, LstmCell, RecurrentCache, RecurrentCell, Sequence};
pub use tensors::{load_tensors, read_tensors, write_tensors, TENSOR_FORMAT_VERSION};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("empty vector")]
    EmptyVector,
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tensor container: {0}")]
    Format(String),
}

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<(), NeuralError> {
    if expected == found {
        Ok(())
    } else {
        Err(NeuralError::ShapeMismatch {
            context,
            expected,
            found,
        })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Anything that owns named parameter tensors. Both methods must visit the
/// tensors in the same order.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    fn zero(&mut self) {
        for m in self.tensors_mut() {
            m.fill(0.0);
        }
    }

    /// Copy with every parameter set to zero; used as a gradient buffer.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.zero();
        z
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, m)| m.as_slice().iter().copied())
            .collect()
    }

    /// Adds `other` scaled by `k`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, k: f64)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            axpy(k, s.as_slice(), dst.as_mut_slice());
        }
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Matrix)>) -> Vec<(String, &'a Matrix)> {
    inner.into_iter().map(|(n, m)| (format!("{prefix}.{n}"), m)).collect()
}
