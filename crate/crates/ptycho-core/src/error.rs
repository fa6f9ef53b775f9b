use thiserror::Error;

/// Errors produced by the reconstruction engine and its I/O layer.
#[derive(Debug, Error)]
pub enum PtychoError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dtype mismatch: {0}")]
    Dtype(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Container-format errors. Kept separate so callers can distinguish a bad
/// file from a bad configuration.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes (not a P4DS container)")]
    BadMagic,
    #[error("container version {found} is newer than supported {supported}")]
    VersionTooNew { found: u32, supported: u32 },
    #[error("truncated section: {0}")]
    Truncated(String),
    #[error("malformed container: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, PtychoError>;

impl PtychoError {
    pub fn shape(msg: impl Into<String>) -> Self {
        PtychoError::Shape(msg.into())
    }
    pub fn dtype(msg: impl Into<String>) -> Self {
        PtychoError::Dtype(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        PtychoError::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        PtychoError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        PtychoError::Data(msg.into())
    }
    pub fn divergence(msg: impl Into<String>) -> Self {
        PtychoError::Divergence(msg.into())
    }
}
