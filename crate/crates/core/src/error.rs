use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("coverage gap: {0} pixels not covered by any crop")]
    CoverageGap(usize),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("frozen parameters changed during stage-2 training")]
    FrozenParametersChanged,

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image codec error: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::Format(_) => "format",
            Error::CoverageGap(_) => "coverage",
            Error::Diverged { .. } => "diverged",
            Error::FrozenParametersChanged => "freeze-violation",
            Error::CheckpointMismatch(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Tensor(_) => "tensor",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
