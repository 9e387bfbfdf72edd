//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FdaError>;

#[derive(Debug, Error)]
pub enum FdaError {
    /// Two operands disagree on layout or dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value. The first field names the offending setting.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    /// An estimator was asked to work with too little data.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// A non-finite value escaped a numeric routine.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl FdaError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        FdaError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        FdaError::Shape(message.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        FdaError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the `fda` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            FdaError::Config { .. } | FdaError::Parse { .. } | FdaError::Io { .. } => 2,
            FdaError::Shape(_) | FdaError::Estimation(_) | FdaError::Numeric(_) | FdaError::Csv(_) => 3,
        }
    }
}
