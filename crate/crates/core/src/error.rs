use thiserror::Error;

use crate::bops::PrecisionCombination;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input at element {index}")]
    NonFiniteInput { index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("group of {0} elements does not fit a 64-lane bit-plane word")]
    GroupTooWide(usize),

    #[error("expected {expected} bit-planes, got {actual}")]
    PlaneCountMismatch { expected: usize, actual: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {0}")]
    VersionUnsupported(u16),

    #[error("unsupported dtype {0}")]
    DtypeUnsupported(String),

    #[error("truncated stream: needed {needed} more bytes")]
    TruncatedStream { needed: usize },

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("result magnitude exceeds binary32 range")]
    Overflow,

    #[error("activation strip of 16 rows at K={k} needs {needed_bits} bits, buffer holds {capacity_bits}")]
    TileExceedsBuffer {
        k: usize,
        needed_bits: u64,
        capacity_bits: u64,
    },

    #[error("oracle failed on {target}: {reason}")]
    OracleFailure { target: String, reason: String },

    #[error("oracle did not answer within {0:?}")]
    OracleTimeout(std::time::Duration),

    #[error("malformed oracle response: {0}")]
    MalformedResponse(String),

    #[error("oracle returned a non-finite score")]
    NonFiniteScore,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn oracle(target: Option<&PrecisionCombination>, reason: impl ToString) -> Self {
        Error::OracleFailure {
            target: target.map_or_else(|| "fp16".to_string(), |c| c.to_string()),
            reason: reason.to_string(),
        }
    }
}
