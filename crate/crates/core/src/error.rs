use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point: spherical coordinates undefined at the origin")]
    DegeneratePoint,

    #[error("degenerate box: size ({w}, {l}, {h}) must be strictly positive")]
    DegenerateBox { w: f64, l: f64, h: f64 },

    #[error("invalid camera calibration: {0}")]
    InvalidCalib(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("could not place {wanted} objects in scene {scene} after {attempts} attempts")]
    Placement {
        scene: usize,
        wanted: usize,
        attempts: usize,
    },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("malformed {what} in {path}: {reason}")]
    Format {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            path: path.into(),
            reason: reason.into(),
        }
    }
}
