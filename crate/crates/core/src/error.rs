use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("inadmissible (delta, T): {0}")]
    Inadmissible(String),

    #[error("assumptions not certifiable: {0}")]
    NotCertifiable(String),

    #[error("certificate invalidated: {0}")]
    Invalidated(String),

    #[error("radius R-bar undefined: delta * L = {0} >= 1")]
    UndefinedRadius(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("problem too large: n = {n} exceeds cap {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed input: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
