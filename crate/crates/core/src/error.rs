//! Crate-wide error type.

use thiserror::Error;

use crate::matrix::MatrixError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Matrix(#[from] MatrixError),

    #[error("config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("step-size guard violated at step {step}: eta*|M|*L = {value:.3e} >= 0.1, use a smaller eta")]
    StepSizeGuard { step: usize, value: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
