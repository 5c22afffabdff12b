use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
    #[error("degenerate up vector: elevation {elevation_deg:.3} deg is at a pole")]
    DegenerateUp { elevation_deg: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("malformed document at {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("schema version mismatch at {path}: expected {expected}, found {found}")]
    SchemaVersion {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
