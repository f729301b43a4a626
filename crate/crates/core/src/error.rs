//! Crate-wide error type. Variants carry enough context to emit a
//! machine-readable error record from the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite input to {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("invalid argument for {what}: {detail}")]
    InvalidArg { what: &'static str, detail: String },

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("data generation error: {0}")]
    Datagen(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("experiment spec mismatch: artifact {path} was produced under spec {found}, current spec is {expected}")]
    SpecMismatch {
        path: String,
        found: String,
        expected: String,
    },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
