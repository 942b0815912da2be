use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EtpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EtpError {
    /// A value violates a documented invariant (bad config, bad interval, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training failed: {0}")]
    Training(String),

    /// The inputs cannot train a model, e.g. a proposal set without positives.
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
}

impl EtpError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        EtpError::Invalid(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        EtpError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EtpError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs rather than by a failure
    /// inside the computation. Insufficient training data counts as input.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            EtpError::Invalid(_) | EtpError::Format { .. } | EtpError::Io { .. } | EtpError::InsufficientData(_)
        )
    }
}
