use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of operands do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A model, training or run configuration violates its invariants.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data (labels, counts, ratios) is out of range.
    #[error("validation error: {0}")]
    Validation(String),

    /// Misuse of an API contract, e.g. calling backward on a non-scalar.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("path error: {}: {reason}", path.display())]
    Path { path: PathBuf, reason: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("metric inversion error: {0}")]
    Inversion(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code for this error: 2 for usage or configuration
    /// problems the caller can fix, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Config(_)
            | Error::Validation(_)
            | Error::Contract(_)
            | Error::Path { .. }
            | Error::Checkpoint(_)
            | Error::Usage(_) => 2,
            Error::NonFinite(_)
            | Error::Inversion(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Image(_)
            | Error::Csv(_) => 1,
        }
    }
}
