use std::io;

use thiserror::Error;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum GlvqError {
    #[error("basis is singular or numerically rank deficient")]
    SingularBasis,

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("degenerate sample: {0}")]
    DegenerateSample(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible bit target {target}: {reason}")]
    InfeasibleTarget { target: f64, reason: &'static str },

    #[error("code {code} does not fit in {bits} bits")]
    CodeOutOfRange { code: i64, bits: u8 },

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("bad archive magic {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated archive record {group} at byte offset {offset}")]
    TruncatedRecord { group: usize, offset: usize },

    #[error("trailing bytes after last archive record: {0}")]
    TrailingBytes(usize),

    #[error("value {0} is not representable as binary16")]
    HalfOverflow(f64),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl GlvqError {
    /// True when the error stems from malformed or mismatched input data
    /// rather than from the environment.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, GlvqError::Io(_) | GlvqError::InvalidArgument(_))
    }
}

pub type Result<T, E = GlvqError> = std::result::Result<T, E>;
