use thiserror::Error;

/// Error type shared by every subsystem of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not compose: mismatched operands, bad layer wiring,
    /// non-divisible pooling extents, mask/image mismatch.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A numeric result left the finite domain (NaN/Inf), a division hit an
    /// exact zero denominator, or a gradient was unusable.
    #[error("numeric fault: {0}")]
    NumericFault(String),

    /// A caller violated an operation's contract (invalid class index,
    /// non-scalar backward root, unfrozen teacher, fixed-point shift
    /// permutation, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed on-disk data: bad magic bytes, truncated payload,
    /// unparseable manifest.
    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::NumericFault(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Machine-readable error kind tag, used by the CLI's stderr JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::NumericFault(_) => "numeric_fault",
            Error::Contract(_) => "contract",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
