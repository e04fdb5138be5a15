use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("invalid slice scheme: {0}")]
    Scheme(#[from] crate::latent::SchemeViolation),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { component: String, step: usize },
    #[error("SMPN requires SMN weights")]
    MissingInit,
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unsupported manifest version {0}")]
    ManifestVersion(u32),
    #[error("missing mask for {0}")]
    MissingMask(String),
    #[error("unknown label {code} in {id}")]
    UnknownLabel { id: String, code: u8 },
    #[error("empty evaluation set")]
    EmptyEvaluation,
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
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::Shape { expected: format!("{expected:?}"), got: format!("{got:?}") }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
