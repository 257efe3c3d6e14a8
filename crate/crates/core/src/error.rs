use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: u64,
        detail: String,
        /// Parameters as they were after the last step with a finite loss.
        last_finite: Box<crate::train::Checkpoint>,
    },

    #[error("checkpoint load failed: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}
