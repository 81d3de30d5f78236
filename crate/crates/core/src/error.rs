use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unmatched pairs: {}", .0.join(", "))]
    UnmatchedStems(Vec<String>),

    #[error("{path}: {message}")]
    Annotation { path: PathBuf, message: String },

    #[error("no pairs found in {0}")]
    NoPairs(PathBuf),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("{path}:{line}: malformed detection record: {message}")]
    Detections { path: PathBuf, line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Whether the failure stems from invalid user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Manifest { .. }
                | Error::Config { .. }
                | Error::UnknownKey(_)
                | Error::Shape(_)
                | Error::InvalidArgument(_)
                | Error::UnmatchedStems(_)
                | Error::NoPairs(_)
                | Error::Annotation { .. }
                | Error::Detections { .. }
        )
    }
}
