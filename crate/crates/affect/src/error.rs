use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum AffectError {
    /// Tensor or feature shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation argument is out of its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A network or trainer configuration is internally inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input with no usable signal (constant tracks, zero variance).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Dataset-level problem: missing stream, empty split, bad layout.
    #[error("data error: {0}")]
    Data(String),

    /// A file failed to parse; names the file and the byte offset.
    #[error("parse error in {file} at byte {offset}: {detail}")]
    Parse {
        file: String,
        offset: u64,
        detail: String,
    },

    /// An API contract was violated by the caller (e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AffectError>;

impl AffectError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        AffectError::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        AffectError::Parameter(msg.into())
    }
}
