use thiserror::Error;

/// Errors produced by the embedding, attention and analysis routines.
#[derive(Debug, Error)]
pub enum RopeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("relative offset ({dx}, {dy}) outside table extent ({width}, {height})")]
    OutOfRange {
        dx: i64,
        dy: i64,
        width: usize,
        height: usize,
    },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RopeError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(RopeError::InvalidArgument(msg.into()))
}
