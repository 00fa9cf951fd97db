use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("divergence overflow: {0}")]
    Overflow(String),
    #[error("schedule construction failed: {0}")]
    Construction(String),
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("teacher invalid: {0}")]
    TeacherInvalid(String),
    #[error("training aborted: {0}")]
    Diverged(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
