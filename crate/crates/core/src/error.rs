use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("numeric error at step {step}: {detail}")]
    Numeric { step: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("binding error: identity token {0} has no bound embedding")]
    Binding(String),

    #[error("tokenization error: {0}")]
    Tokenization(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("schema version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("adapter unreachable: {0}")]
    Connectivity(String),

    #[error("adapter contract violation: {0}")]
    ContractViolation(String),

    #[error("segmentation produced an empty mask for {0}")]
    EmptyMask(String),

    #[error("object generation failed for {object_id} after {attempts} attempts")]
    ObjectGeneration { object_id: String, attempts: u32 },

    #[error("placement error: {0}")]
    Placement(String),

    #[error("composition error: missing asset for object {0}")]
    Composition(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
