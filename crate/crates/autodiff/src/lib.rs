//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Tape`] is built fresh for every forward pass. Operations append nodes
//! in evaluation order and [`Tape::backward`] walks them in reverse,
//! accumulating gradients across fan-out. Broadcasting is limited to adding a
//! row vector onto every row of a matrix ([`Tape::add_row`]).

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_norm, grad_check_sampled, relative_error};
pub use tape::{Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
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
    #[error("slice {start}..{end} on axis {axis} out of range for shape {shape:?}")]
    InvalidSlice {
        axis: usize,
        start: usize,
        end: usize,
        shape: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("concat needs at least one input")]
    EmptyConcat,
    #[error("backward needs a one-element loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
}
