use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The variants map onto the CLI exit codes: `Input`/`Constraint`/`Shape`
/// are caller mistakes, `Format`/`Io` are data problems, `Numeric` is a
/// diverging or non-finite computation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// File-format problems. Each one is reported distinctly so that a corrupt
/// checkpoint is distinguishable from a truncated one.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("payload checksum mismatch: header says {expected}, payload hashes to {found}")]
    Checksum { expected: String, found: String },
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("csv error: {0}")]
    Csv(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
