use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum MoodError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// Malformed or unsupported on-disk content.
    #[error("format error: {0}")]
    Format(String),

    /// A value violates a type invariant (non-finite feature, negative label, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Input dimensions do not match what the model or container expects.
    #[error("shape error: {0}")]
    Shape(String),

    /// Image or patch geometry does not divide evenly.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// An argument is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The data cannot support the requested computation.
    #[error("data error: {0}")]
    Data(String),

    /// A configuration is inconsistent or missing required context.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values or a failed factorization.
    #[error("numeric error: {message}")]
    Numeric { message: String, step: Option<usize> },
}

impl MoodError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        MoodError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        MoodError::Numeric {
            message: message.into(),
            step: None,
        }
    }

    pub fn numeric_at(step: usize, message: impl Into<String>) -> Self {
        MoodError::Numeric {
            message: format!("step {step}: {}", message.into()),
            step: Some(step),
        }
    }
}

pub type Result<T, E = MoodError> = std::result::Result<T, E>;
