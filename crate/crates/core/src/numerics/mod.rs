//! Dense-tensor numerical core.
//!
//! Row-major f32 storage with explicit shapes, a Wengert tape for
//! reverse-mode gradients, and a central finite-difference oracle used to
//! verify every differentiable primitive. No broadcasting beyond what the
//! transformer needs.

mod finite_diff;
pub mod kernels;
mod param;
mod rng;
mod tape;
pub(crate) mod tensor;

pub use finite_diff::{finite_diff_grad, max_rel_err, norm_rel_err, DEFAULT_FD_STEP};
pub use param::{Mask, Parameter};
pub use rng::{normal_f32, seeded, stream, uniform01, DetRng};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{erf, gelu_grad_scalar, gelu_scalar, Tensor, GELU_SQRT_2};

use thiserror::Error;

/// Errors surfaced by tensor and tape operations.
///
/// NaN/Inf is an error surface, not a value: operations that can produce
/// non-finite output detect it and fail instead of propagating.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum NumericsError {
    #[error("{context}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("matmul inner dimensions disagree: {lhs_k} vs {rhs_k}")]
    InnerDimMismatch { lhs_k: usize, rhs_k: usize },
    #[error("{context}: expected rank-{expected} tensor, got shape {got:?}")]
    RankMismatch {
        context: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("softmax row {row} is fully masked")]
    AllMaskedRow { row: usize },
    #[error("target {index} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { index: usize, vocab: usize },
    #[error("backward already ran on this tape; re-tape before calling again")]
    TapeConsumed,
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },
    #[error("reshape cannot change element count: {from} -> {to}")]
    NumelMismatch { from: usize, to: usize },
    #[error("column slice [{start}, {end}) out of bounds for width {width}")]
    SliceOutOfBounds {
        start: usize,
        end: usize,
        width: usize,
    },
}

pub type Result<T> = std::result::Result<T, NumericsError>;
