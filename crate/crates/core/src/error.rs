use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LightError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LightError {
    /// Invalid configuration value.
    #[error("invalid configuration: `{field}`: {message}")]
    Config { field: String, message: String },

    /// Tensor or feature-map shapes that do not fit together.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or missing dataset / checkpoint content.
    #[error("data error: {0}")]
    Data(String),

    /// A loss term became NaN or infinite during training.
    #[error("non-finite `{part}` loss at step {step} ({value})")]
    NonFinite { part: String, step: usize, value: f64 },
}

impl LightError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { field: field.into(), message: message.into() }
    }

    pub fn shape(message: impl Into<String>) -> Self {
        Self::Shape(message.into())
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::Data(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            Self::Shape(_) | Self::Io { .. } | Self::Data(_) => 3,
            Self::NonFinite { .. } => 4,
        }
    }
}
