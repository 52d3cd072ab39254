use std::io;

use thiserror::Error;

use crate::data::DataError;
use crate::nn::io::ModelFileError;
use crate::wire::FrameError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid split plan: {0}")]
    InvalidPlan(String),

    /// R² is undefined when the targets have zero variance.
    #[error("R² undefined: target series is constant")]
    UndefinedR2,

    #[error("artifact hash mismatch for {path}: expected {expected}, found {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error(transparent)]
    ModelFile(#[from] ModelFileError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Frame(#[from] FrameError),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
