//! Minimal dense 2-D tensors with tape-based reverse-mode differentiation.
//!
//! Every operation records its inputs on a [`Tape`]; [`Tape::backward`]
//! walks the tape once in reverse and returns the parameter gradients.
//! Parameters live in a [`ParamStore`] that the tape borrows immutably, so
//! independent tapes can evaluate the same parameters concurrently.

mod params;
mod tape;
mod tensor;

pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{argmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
    #[error("backward needs a 1x1 loss, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("index {index} out of range for {rows} rows in {op}")]
    Index { op: &'static str, index: usize, rows: usize },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("non-finite gradient for parameter {name:?} (entry {index})")]
    NonFiniteGradient { name: String, index: usize },
    #[error("dropout rate must lie in [0, 1), got {0}")]
    DropoutRate(f32),
}

pub type Result<T, E = AutogradError> = std::result::Result<T, E>;
