//! Crate-wide error type and result alias.

use thiserror::Error;

/// A single invariant violation found while validating a sample.
///
/// Violations are data, not failures: validation collects every problem it
/// finds instead of stopping at the first one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Which invariant was broken, e.g. `"label out of range"`.
    pub kind: String,
    /// Human-readable detail naming the offending field or value.
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.detail)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A box was clipped away entirely (no overlap with the image).
    #[error("box lies entirely outside the image")]
    EmptyBox,

    /// One or more samples failed validation during loading.
    #[error("sample '{id}' failed validation: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Validation { id: String, violations: Vec<Violation> },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Training produced a non-finite loss; carries the last loss breakdown.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint config hash mismatch: checkpoint was written under a different configuration")]
    CheckpointConfigHash,

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::EmptyBox
            | Error::Validation { .. }
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::CheckpointVersion { .. }
            | Error::CheckpointConfigHash
            | Error::CheckpointCorrupt(_) => 2,
            Error::NumericFailure(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
