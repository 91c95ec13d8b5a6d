use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rejected motion spec: {0}")]
    RejectedSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// Training or guidance produced NaN/inf; carries a diagnostic dump.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stale stage `{stage}`: outputs exist with config hash {found}, expected {expected}")]
    StaleStage {
        stage: String,
        found: String,
        expected: String,
    },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

impl Error {
    /// Process exit status for the CLI: 2 for configuration problems, 3 for
    /// numerical aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::StaleStage { .. } | Error::UnknownToken(_) => 2,
            Error::Numerical(_) | Error::NonFinite(_) => 3,
            _ => 1,
        }
    }
}
