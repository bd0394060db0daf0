use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backend kind mismatch: expected a {expected} backend, got {actual}")]
    WrongBackend { expected: &'static str, actual: String },

    #[error("weights at {path}: {msg}")]
    Weights { path: PathBuf, msg: String },

    #[error("no images found in {0}")]
    NoImages(PathBuf),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config {location}: key `{key}`: {msg}")]
    Config {
        location: String,
        key: String,
        msg: String,
    },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("covariance is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
