use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt header {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },

    #[error("non-binary mask: value {value} at voxel {index}")]
    NonBinaryMask { value: f32, index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("wrong volume kind: expected {expected}, found {found}")]
    WrongKind { expected: String, found: String },

    #[error("undefined ASD: {0} mask is empty")]
    UndefinedAsd(&'static str),

    #[error("empty body mask")]
    EmptyBodyMask,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss for case {case_id}")]
    NonFiniteLoss { case_id: String },

    #[error("missing input: {0}")]
    Missing(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
