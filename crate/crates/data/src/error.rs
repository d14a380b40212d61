use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("image too small: {height}x{width} is smaller than the required {min}x{min}")]
    TooSmall { height: usize, width: usize, min: usize },

    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),

    #[error("invalid synthesis parameter: {0}")]
    InvalidParams(String),

    #[error("unknown degradation label `{0}` (expected raindrop, haze or noise)")]
    UnknownLabel(String),

    #[error("manifest validation failed: {0}")]
    InvalidManifest(String),

    #[error("no input images found in {0}")]
    EmptyInput(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        DataError::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;
