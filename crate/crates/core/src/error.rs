//! Errors shared across the crate.

/// Crate-wide error type.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Malformed graph or topology (cycles, disconnection, bad indices).
    #[error("structural error: {0}")]
    Structural(String),

    /// Non-finite values or ill-posed numeric input.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
