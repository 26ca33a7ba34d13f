use std::path::PathBuf;

use thiserror::Error;

use crate::substrate::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("segmentation maps differ in size: {0}x{1} vs {2}x{3}")]
    SegMapSize(usize, usize, usize, usize),

    #[error("segmentation maps declare different class counts: {0} vs {1}")]
    ClassCount(usize, usize),

    #[error("empty segmentation map")]
    EmptySegMap,

    #[error("class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { index: u8, num_classes: usize },

    #[error("no cached score for pair ({0}, {1})")]
    MissingPair(usize, usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("patch request of {requested} exceeds {available} feature locations")]
    TooManyPatches { requested: usize, available: usize },

    #[error("non-finite {term} loss at epoch {epoch}, iteration {iteration}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        iteration: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint was written for a different model configuration")]
    ConfigDrift,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("malformed record: {0}")]
    Record(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Self::Image {
            path: path.into(),
            source,
        }
    }
}
