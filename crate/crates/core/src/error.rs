use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("two ground-truth points fall into grid cell (row {row}, col {col})")]
    TwoPointsOneCell { row: usize, col: usize },

    #[error("point ({x}, {y}) lies outside the {size}x{size} image")]
    PointOutOfBounds { x: f64, y: f64, size: usize },

    #[error("schema error in {file}: {message}")]
    Schema { file: String, message: String },

    #[error("slot in {file} references missing point index {index}")]
    DanglingSlotRef { file: String, index: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("total loss needs at least one labeled sample")]
    ZeroLabeled,

    #[error("detections present but there is no ground truth to match against")]
    ZeroGt,

    #[error("non-finite loss at step {step} (batch {batch}): {detail}")]
    NonFiniteLoss {
        step: u64,
        batch: usize,
        detail: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(file: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            file: file.into(),
            message: message.into(),
        }
    }
}
