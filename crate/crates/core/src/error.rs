use std::path::PathBuf;

use nlcen_tensor::checkpoint::CheckpointError;
use nlcen_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("mask value {value} at pixel {index} is not 0 or 1")]
    NonBinaryMask { value: u8, index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image `{0}` has no paired mask")]
    MissingMask(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("non-finite gradient at attack iteration {0}")]
    NonFiniteGradient(usize),

    #[error("checkpoint does not match the architecture: {0}")]
    ArchitectureMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
