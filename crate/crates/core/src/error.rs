//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced while loading inputs or running the solver.
#[derive(Debug, Error)]
pub enum Error {
    /// A document contributed no usable tokens (all filtered or out of vocabulary).
    #[error("document {0} has no in-vocabulary tokens")]
    EmptyDocument(usize),

    /// An index referred past the end of the structure that owns it.
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    /// A line of an input file did not match the expected format.
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// The same token appeared twice in an embedding file.
    #[error("duplicate token {0:?} in embedding file")]
    DuplicateToken(String),

    /// A scaling denominator became zero or non-finite during iteration.
    #[error("numerical breakdown: denominator at entry {entry} is zero or non-finite")]
    NumericalBreakdown { entry: usize },

    /// The regularization strength drove an entire kernel row below
    /// representable range, so no mass can move out of that word.
    #[error("lambda too large: kernel row {row} underflowed to zero")]
    LambdaTooLarge { row: usize },

    /// Two operands disagreed on a shared dimension.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Underlying I/O failure while reading input files.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convenience alias used by every fallible function in the crate.
pub type Result<T> = std::result::Result<T, Error>;
