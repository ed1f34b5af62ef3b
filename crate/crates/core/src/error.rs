use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("unsupported image format in {}: {detail}", path.display())]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error("corrupt image {}: {detail}", path.display())]
    CorruptImage { path: PathBuf, detail: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("light-map bank is empty and procedural fallback is disabled")]
    EmptyBank,

    #[error("no usable images in {}", .0.display())]
    EmptyDataset(PathBuf),

    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize, trace: Vec<f64> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Metric(#[from] MetricError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Failures of a quality metric invocation.
#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric command `{0}` does not resolve to an executable")]
    NotExecutable(String),

    #[error("failed to spawn metric command: {0}")]
    Spawn(std::io::Error),

    #[error("metric command exited with status {code:?}: {stderr}")]
    NonZeroExit { code: Option<i32>, stderr: String },

    #[error("metric command timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("could not parse metric output {0:?} as a finite real")]
    Unparseable(String),

    #[error("could not stage image for metric: {0}")]
    Staging(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for errors caused by user-supplied data rather than internal faults.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::NotFound(_)
                | Error::UnsupportedFormat { .. }
                | Error::CorruptImage { .. }
                | Error::Io { .. }
                | Error::InvalidImage(_)
                | Error::DimensionMismatch(_)
                | Error::InvalidConfig(_)
                | Error::EmptyBank
                | Error::EmptyDataset(_)
                | Error::Checkpoint(_)
                | Error::Metric(_)
                | Error::Json(_)
        )
    }
}
