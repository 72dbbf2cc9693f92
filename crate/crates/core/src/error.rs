//! Crate-wide error type.

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid pattern: {0}")]
    InvalidPattern(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f32 },

    #[error("fine-tune callback failed at stage {stage}: {reason}")]
    FineTune { stage: usize, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by reading or decoding files.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::MagicMismatch { .. }
                | Error::UnsupportedVersion(_)
                | Error::Malformed(_)
                | Error::Truncated(_)
        )
    }
}
