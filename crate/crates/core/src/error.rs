use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mask has no foreground voxels")]
    EmptyMask,

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("invalid temperature {0}: must be positive")]
    InvalidTemperature(f64),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("point cloud carries no provenance")]
    MissingProvenance,

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("need {needed} background voxels outside the box, found {available}")]
    InsufficientBackground { needed: usize, available: usize },

    #[error("anchor sample contains a single label class")]
    SingleClass,

    #[error("voxel ({0}, {1}, {2}) is not covered by any patch")]
    CoverageGap(usize, usize, usize),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid config key `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
