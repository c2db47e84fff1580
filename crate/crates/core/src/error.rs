use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tape error: {0}")]
    Tape(&'static str),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid prune plan: {0}")]
    Plan(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("{0}")]
    Linalg(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Stable short code used in one-line CLI errors and by the C API.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Tape(_) => "tape",
            Error::EmptyBatch => "empty_batch",
            Error::Model(_) => "model",
            Error::Plan(_) => "plan",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::Linalg(_) => "linalg",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}
