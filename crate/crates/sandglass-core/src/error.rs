//! Error type shared across the crate.

/// All fallible operations in this crate return [`Error`].
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// A shape or dimension constraint was violated (bad tensor construction,
    /// kernel larger than supported, non-square weights, ...).
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Two tensors that must agree in shape (or dtype) do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A block or model configuration is out of range (stride not in {{1,2}},
    /// zero channels, alpha outside [0,1], ...).
    #[error("invalid config: {0}")]
    Config(String),

    /// A binary file violates the on-disk format. `offset` is the byte
    /// position at which the violation was detected.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A JSON document violates the expected schema. `pointer` is a JSON
    /// pointer to the offending field ("/stages/3/t").
    #[error("parse error at {pointer}: {msg}")]
    Parse { pointer: String, msg: String },

    /// A numeric failure: NaN or infinity where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
