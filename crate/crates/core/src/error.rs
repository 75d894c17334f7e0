use thiserror::Error;

/// Errors raised anywhere in the laboratory core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("hessian-vector probe: {0}")]
    Hvp(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("task error: {0}")]
    Task(String),

    #[error("objective error: {0}")]
    Objective(String),

    #[error("training diverged at iteration {iter}, update {update}: {reason}")]
    Divergence {
        iter: usize,
        update: usize,
        reason: String,
    },

    #[error("monte-carlo estimate degenerate: {0}")]
    Degenerate(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
