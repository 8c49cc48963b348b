//! One error type for the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AtlsError {
    /// Bad parameter or malformed input; the CLI maps this to exit code 2.
    #[error("{0}")]
    Invalid(String),

    /// Training produced a non-finite loss; the CLI maps this to exit code 3.
    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AtlsError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        AtlsError::Invalid(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AtlsError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AtlsError>;
