//! Dense tensors with a small reverse-mode differentiation tape.
//!
//! Everything is generic over [`Scalar`]: `f32` for training, `f64` for
//! gradient verification.

mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of bounds ({bound})")]
    Index { index: usize, bound: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("empty input to {op}")]
    Empty { op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
