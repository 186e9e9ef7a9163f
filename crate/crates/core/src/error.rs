use thiserror::Error;

/// Error type shared across the whole crate.
#[derive(Debug, Error)]
pub enum HvqError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("backward already ran on this tape; re-run the forward pass first")]
    DoubleBackward,
    #[error("codec error: {0}")]
    Codec(String),
    #[error("archive format error: {0}")]
    Format(String),
    #[error("bad magic bytes: not a recognized file of this tool")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("section table invalid: {0}")]
    SectionTable(String),
    #[error("model hash mismatch: archive expects {expected}, model is {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HvqError>;
