//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Errors raised by tensor ops, model construction, training and retrieval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Shape/dimension mismatch; `detail` names the offending shapes.
    Dim { op: &'static str, detail: String },
    /// Token id outside the vocabulary.
    Vocab { token_id: u32, vocab_size: usize },
    /// Invalid configuration value.
    Config(String),
    /// API contract violation (e.g. backward on a non-scalar).
    Contract(String),
    /// Bad input data while ingesting a corpus or index.
    Ingestion(String),
    /// Requested k exceeds the number of indexed entries.
    BoundedIndex { k: usize, size: usize },
    /// A gradient contained NaN/inf; the optimizer step was aborted.
    NonFiniteGrad { param: String },
    /// Malformed or mismatched serialized state (checkpoints, indices).
    Format(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Vocab { token_id, vocab_size } => {
                write!(f, "vocabulary error: token id {token_id} out of range (vocab size {vocab_size})")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::Ingestion(msg) => write!(f, "ingestion error: {msg}"),
            Error::BoundedIndex { k, size } => {
                write!(f, "bounded-index error: k={k} exceeds index size {size}")
            }
            Error::NonFiniteGrad { param } => {
                write!(f, "non-finite gradient for parameter {param}; step aborted")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}
