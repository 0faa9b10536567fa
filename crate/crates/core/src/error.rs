use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {msg}")]
    Shape {
        node: usize,
        op: &'static str,
        msg: String,
    },

    #[error("parameter `{0}` not found")]
    MissingParam(String),

    #[error("expected {expected} graph inputs, got {actual}")]
    InputCount { expected: usize, actual: usize },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("graph output is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),

    #[error("graph has no output node")]
    NoOutput,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite loss at batch {batch} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::InputCount { .. } | Error::NotScalar(_) => "shape",
            Error::MissingParam(_) => "missing-param",
            Error::BackwardBeforeForward | Error::NoOutput => "graph",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => "numeric",
            Error::Config { .. } => "config",
            Error::Format { .. } | Error::Json(_) => "format",
            Error::Io { .. } => "io",
        }
    }
}
