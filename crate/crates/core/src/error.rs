//! Error types shared across the pipeline.

use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad ranges, dimension mismatches, missing inputs).
    #[error("config: {0}")]
    Config(String),

    /// Invalid data (invariant violations, unknown identifiers, bad values).
    #[error("data: {0}")]
    Data(String),

    /// A delimited input file failed to parse.
    #[error("parse: {path}:{row}: {msg}")]
    Parse {
        path: String,
        row: usize,
        msg: String,
    },

    /// A binary artifact or sidecar failed validation (shape, checksum).
    #[error("format: {0}")]
    Format(String),

    /// Non-finite value produced by a numeric stage.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Training could not proceed (degenerate labels, divergence context).
    #[error("training: {0}")]
    Training(String),

    /// A statistical test was requested on degenerate inputs.
    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn parse(path: &std::path::Path, row: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.display().to_string(),
            row,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
