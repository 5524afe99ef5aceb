use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside the domain of the operation.
    #[error("parameter out of domain: {0}")]
    ParamDomain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("metrics undefined: {0}")]
    Metrics(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config hash mismatch: expected {expected}, found {found}")]
    ConfigMismatch { expected: String, found: String },

    #[error("invalid watermark string: {0}")]
    WatermarkFormat(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("image codec error for {path}: {message}")]
    ImageCodec { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
