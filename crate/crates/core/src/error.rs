use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("region ({row}, {col}) of image {image_id} was already acquired")]
    DuplicateAcquisition {
        image_id: String,
        row: usize,
        col: usize,
    },

    #[error("no labeled pixels in the pool")]
    EmptyPool,

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("cannot train: {0}")]
    CannotTrain(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("config conflict: {0}")]
    ConfigConflict(String),

    #[error("incomplete run: {0}")]
    IncompleteRun(String),

    #[error("malformed {what} at {path}: {reason}")]
    Format {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI, one per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::DuplicateAcquisition { .. } => 3,
            Error::EmptyPool | Error::EmptyBuffer | Error::CannotTrain(_) => 4,
            Error::UndefinedMetric(_) => 5,
            Error::ConfigConflict(_) => 6,
            Error::IncompleteRun(_) => 7,
            Error::Format { .. } => 8,
            Error::Locked(_) => 9,
            Error::Io(_) | Error::Json(_) | Error::Image(_) => 10,
        }
    }
}
