use thiserror::Error;

/// Errors produced by model construction, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown layer `{name}`; registry has: {available:?}")]
    UnknownLayer { name: String, available: Vec<String> },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain index {index} out of range for {n_domains} domains")]
    DomainIndex { index: usize, n_domains: usize },

    #[error("domain mapping has no entry for student domain {0}")]
    UnmappedDomain(usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
