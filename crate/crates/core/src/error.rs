//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map one-to-one onto the CLI exit codes documented in the README:
/// parse errors → 2, validation errors → 3, numerical failures → 4,
/// resonance-matching failures → 5.
#[derive(Debug, Error)]
pub enum Error {
    /// Netlist or configuration text could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// The circuit is structurally unfit for analysis (see
    /// [`crate::netlist::ValidationReport`]).
    #[error("invalid circuit: {0}")]
    Validation(String),

    /// A numerical operation failed (singular matrix, defective pencil,
    /// non-convergence, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A requested resonance could not be matched to an eigenvalue pair,
    /// or the match was ambiguous.
    #[error("resonance matching failed: {0}")]
    ResonanceMatch(String),

    /// The operation is outside the supported problem class.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// File I/O error (CLI paths, covariance files, ...).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Convenience constructor for parse errors.
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }

    /// Convenience constructor for numerical failures.
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code associated with this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } => 2,
            Error::Validation(_) => 3,
            Error::Numerical(_) => 4,
            Error::ResonanceMatch(_) => 5,
            Error::Unsupported(_) => 4,
            Error::Io(_) => 1,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
