//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/graph dimension mismatch, with a report of the offending shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Reverse-mode differentiation requires a scalar output.
    #[error("gradient requires a scalar output, got {len} elements")]
    NonScalarOutput { len: usize },

    /// Invalid argument (bad norm order, non-positive temperature, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Threat model whose constraint set would be empty at the anchor point.
    #[error("infeasible threat model: {0}")]
    InfeasibleThreat(String),

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    /// Malformed input file (IDX/PGM/checkpoint parsing).
    #[error("parse error in {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
