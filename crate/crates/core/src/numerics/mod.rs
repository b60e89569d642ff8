//! Dense tensors, a reverse-mode tape, a parameter registry and a
//! finite-difference gradient checker.

mod gradcheck;
mod registry;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use registry::{BoundParams, ParamId, ParamRegistry};
pub use tape::{Adjacency, Gradients, Tape, Var};
pub use tensor::Tensor;

/// LeakyReLU slope used wherever the model applies one.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: row {row} has no unmasked entries")]
    AllMasked { op: &'static str, row: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of bounds for extent {bound}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("{0}")]
    InvalidArgument(String),
}
