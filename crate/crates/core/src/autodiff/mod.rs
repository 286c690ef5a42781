//! Dense `f64` tensors with a reverse-mode tape.
//!
//! The op set is deliberately small: it covers the segmenter, the memory
//! encoder and the Dice/BCE loss, nothing more. Every op has a hand-written
//! vector-Jacobian product checked against central differences in the tests.

mod gradcheck;
mod tape;
mod tensor;

pub use tensor::sigmoid;

pub use gradcheck::{check_op, grad_check, numeric_gradient, op_suite, SUITE_EPS};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("loss must be a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this tape")]
    DetachedNode,
    #[error("function evaluated to a non-finite value at coordinate {0}")]
    NonFiniteEvaluation(usize),
}
