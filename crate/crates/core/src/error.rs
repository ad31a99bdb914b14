//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions of operands do not agree.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An input fell outside an operation's documented domain
    /// (log of a non-positive value, division by zero, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API contract was violated (non-scalar loss, set too small, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loop exceeds the model's padded capacity.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Fixed-column or record parsing failed; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Dataset schema or content problem (gaps, unknown residues, splits).
    #[error("data error: {0}")]
    Data(String),

    /// The rejection budget of the synthetic-loop generator ran out.
    #[error("synthesis failed: {0}")]
    Synthesis(String),

    /// A numeric failure such as a NaN loss during training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Configuration value out of range or unreadable.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
