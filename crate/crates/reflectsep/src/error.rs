use std::io;
use std::path::{Path, PathBuf};

use reflectsep_core::Error as CoreError;

/// Process exit status of the command-line tool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path}: no image files")]
    EmptyDir { path: PathBuf },
    #[error("{path}: line {line}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: checkpoint format version {found}, expected {expected}")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: checkpoint parameter {name} has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        path: PathBuf,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: corrupt checkpoint: {reason}")]
    CheckpointCorrupt { path: PathBuf, reason: String },
    #[error("checkpoint {what} is {found}, run expects {expected}")]
    Mismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn corrupt(path: &Path, reason: impl Into<String>) -> Self {
        Self::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }

    pub fn exit_status(&self) -> ExitStatus {
        match self {
            Self::Usage(_) | Self::Config { .. } => ExitStatus::Usage,
            Self::GradCheck(_) => ExitStatus::Numerical,
            Self::Core(CoreError::NonFiniteLoss { .. } | CoreError::NonFinite { .. }) => {
                ExitStatus::Numerical
            }
            _ => ExitStatus::Data,
        }
    }
}
