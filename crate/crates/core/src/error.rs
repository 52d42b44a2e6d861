use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum MatchaError {
    /// An input violated an operation's precondition (shapes, ranges, counts).
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration value violated its invariants.
    #[error("config error: {0}")]
    Config(String),
    /// A file or byte stream did not follow its declared format.
    #[error("format error: {0}")]
    Format(String),
    /// A computation produced a non-finite value or could not converge.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Not enough data to run an estimator.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MatchaError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(MatchaError::Domain(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(MatchaError::Config(msg.into()))
}

pub(crate) fn format<T>(msg: impl Into<String>) -> Result<T> {
    Err(MatchaError::Format(msg.into()))
}
