use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
