use std::path::PathBuf;

/// Errors raised across the training stack.
#[derive(Debug, thiserror::Error)]
pub enum GctError {
    /// A function received data that violates its shape or range contract.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// A configuration value is outside its valid range.
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    /// Training produced a non-finite loss; `dump` names the diagnostic file when one was written.
    #[error("non-finite loss at step {step} ({detail}){}", dump.as_ref().map(|p| format!(", batch dump at {}", p.display())).unwrap_or_default())]
    NonFinite {
        step: u64,
        detail: String,
        dump: Option<PathBuf>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, GctError>;

impl GctError {
    pub fn input(msg: impl Into<String>) -> Self {
        GctError::InvalidInput(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        GctError::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GctError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        GctError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
