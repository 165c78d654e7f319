//! Crate-wide error type.
//!
//! One enum covers every module: numeric contract violations, file format
//! problems, configuration and data errors, and training divergence. The CLI
//! maps these onto its exit codes (config 2, data/file 3, divergence 4).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree; `detail` names the offending axes.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A precondition on argument values (not shapes) was violated.
    #[error("{op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A file exists but its bytes do not form the expected format.
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },

    /// A file is truncated or internally inconsistent.
    #[error("{path}: corrupt or truncated: {detail}")]
    Corrupt { path: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss; `detail` records the last healthy
    /// epoch so the run can be diagnosed.
    #[error("numeric divergence in stage '{stage}' at epoch {epoch}: {detail}")]
    Divergence {
        stage: String,
        epoch: u32,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}
