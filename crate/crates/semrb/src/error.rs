//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("condensation failed in element {element}: {reason}")]
    Condensation { element: usize, reason: String },

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("artifact has wrong magic bytes (not a semrb artifact)")]
    BadMagic,

    #[error("artifact format version {found} unsupported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("artifact was built for a different discretization (fingerprint {found:#018x}, expected {expected:#018x})")]
    FingerprintMismatch { found: u64, expected: u64 },

    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
