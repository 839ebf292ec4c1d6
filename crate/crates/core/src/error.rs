use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("index has no records")]
    EmptyIndex,

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("k = {k} is out of range for an index of {count} records")]
    InvalidK { k: usize, count: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("unsupported channel count {0} (expected mono)")]
    UnsupportedChannels(u16),

    #[error("unsupported sample format: {0}")]
    UnsupportedFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable error name, printed by the command-line front end.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "DimensionError",
            Error::EmptyInput(_) => "EmptyInputError",
            Error::ZeroNorm(_) => "ZeroNormError",
            Error::NonFinite(_) => "NonFiniteError",
            Error::EmptyIndex => "EmptyIndexError",
            Error::DuplicateId(_) => "DuplicateIdError",
            Error::InvalidK { .. } => "InvalidKError",
            Error::Parameter(_) => "ParameterError",
            Error::Format(_) => "FormatError",
            Error::Validation(_) => "ValidationError",
            Error::UnsupportedChannels(_) => "UnsupportedChannelsError",
            Error::UnsupportedFormat(_) => "UnsupportedFormatError",
            Error::Io { .. } => "IoError",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
