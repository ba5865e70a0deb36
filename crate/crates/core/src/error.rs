use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration value is missing, inconsistent, or out of range.
    #[error("config error: {0}")]
    Config(String),

    /// A file did not match the expected on-disk format. `field` names the
    /// offending field so callers can report precisely what was wrong.
    #[error("format error in {path}: field `{field}`: {message}")]
    Format {
        path: PathBuf,
        field: String,
        message: String,
    },

    /// An artifact (checkpoint, train state) is corrupt or inconsistent.
    #[error("corrupt artifact {path}: {message}")]
    Corrupt { path: PathBuf, message: String },

    /// Training or evaluation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
