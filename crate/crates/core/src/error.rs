//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("backward() called twice on the same graph")]
    BackwardTwice,

    #[error("backward() requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} (task={task_loss}, penalty={penalty})")]
    NonFiniteLoss {
        step: usize,
        task_loss: f32,
        penalty: f32,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("no active mask sample for family {0}")]
    MissingMask(&'static str),

    #[error("mask is not binary: {0}")]
    NonBinaryMask(String),

    #[error("cannot excise: every hidden dimension is gated off")]
    AllHiddenPruned,

    #[error("infeasible sparsity target {requested}: max achievable is {max_achievable}")]
    InfeasibleTarget {
        requested: f32,
        max_achievable: f32,
    },

    #[error("empty evaluation set: {0}")]
    EmptyEvalSet(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
