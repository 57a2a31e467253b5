use thiserror::Error;

use crate::provider::ProviderError;

pub type Result<T, E = LcmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LcmError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid pattern at position {position}: {message}")]
    InvalidPattern { position: usize, message: String },
    #[error("{0}")]
    Forbidden(String),
    #[error("{0}")]
    Rejected(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("storage error: {0}")]
    Storage(#[from] rusqlite::Error),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LcmError {
    /// Stable class name used by the HTTP layer and the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            LcmError::NotFound(_) => "not_found",
            LcmError::Integrity(_) => "integrity",
            LcmError::Invalid(_) | LcmError::InvalidPattern { .. } | LcmError::Parse { .. } => {
                "invalid"
            }
            LcmError::Forbidden(_) => "forbidden",
            LcmError::Rejected(_) => "rejected",
            LcmError::Io { .. } => "io",
            LcmError::Storage(_) => "storage",
            LcmError::Provider(_) => "provider",
            LcmError::Json(_) => "invalid",
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LcmError::Io {
            path: path.into(),
            source,
        }
    }
}
