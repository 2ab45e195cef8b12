use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CknError {
    #[error("{path}: unsupported or corrupt raster ({reason})")]
    Raster { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad file format: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("extraction window lies entirely outside the image")]
    WindowOutside,

    #[error("no informative patches: every candidate sub-patch has zero norm")]
    NoInformativePatches,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("need at least {needed} samples, got {got}")]
    NotEnoughSamples { needed: usize, got: usize },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("manifest mismatch: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, CknError>;

impl CknError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CknError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CknError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
