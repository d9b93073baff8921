//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is `f64` and CPU-only. A [`Tape`] records operations as they
//! execute ("define by run"); [`Tape::backward`] replays them in reverse to
//! accumulate leaf gradients. The op set is exactly what the desk-scale
//! networks in this workspace need — dense matmul, 1-D convolution, the usual
//! activations and normalizations, gather/concat/reshape plumbing, and two
//! gradient-routing primitives (`stop_gradient`, `straight_through`).
//!
//! Companion pieces: [`optim`] (AdamW + global-norm clipping + EMA),
//! [`schedule`] (cosine with linear warmup), [`checkpoint`] (named-tensor
//! serialization), and [`gradcheck`] (the central-finite-difference suite the
//! `gradcheck` CLI subcommand runs).
//!
//! Design notes:
//! - No broadcasting beyond a leading batch/row dimension (`add_rows`,
//!   `add_cols`); anything else requires an explicit `reshape`. This keeps
//!   shapes auditable.
//! - A `Tape` is single-owner while recording. Separate tapes may run on
//!   separate threads; gradient reduction order is the caller's business.
//! - Determinism: identical inputs and op order produce bitwise-identical
//!   values and gradients.

mod kernels;
mod ops;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use tape::{Grads, NodeId, Tape};
pub use tensor::Tensor;

/// Errors shared by the tensor engine and its serialization helpers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operands have incompatible shapes for the named operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// `backward` was called on a non-scalar node.
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// A gather/lookup index was out of bounds.
    #[error("index {index} out of range for {op} (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// An argument failed validation (non-positive dimension, empty input, ...).
    #[error("invalid argument to {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    /// Checkpoint file missing, truncated, or structurally invalid.
    #[error("corrupt checkpoint: {detail}")]
    CorruptCheckpoint { detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
