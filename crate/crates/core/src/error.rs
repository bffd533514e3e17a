use thiserror::Error;

/// Errors produced by the compression pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Underlying I/O failure (missing file, unwritable path, ...).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Byte-level layout problems: wrong sizes, bad magic, truncation.
    #[error("format error: {0}")]
    Format(String),

    /// Semantic problems with the data itself (non-finite values, dim mismatch).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration (zero error bound, zero groups, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Checksum mismatch while parsing a payload or archive.
    #[error("corruption detected: {0}")]
    Corrupt(String),

    /// Container version this build does not understand.
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
}

pub type Result<T> = std::result::Result<T, Error>;
