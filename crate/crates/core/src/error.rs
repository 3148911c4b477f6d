use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A normalization denominator vanished where a value was requested.
    #[error("numerically degenerate: {0}")]
    Degenerate(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(#[from] FormatError),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Decoding failures for the binary checkpoint and grid files.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("unknown grid kind {0}")]
    UnknownKind(u8),

    #[error("malformed content: {0}")]
    Malformed(String),

    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
