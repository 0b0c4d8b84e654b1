use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty content: {0}")]
    Empty(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Argument(_) | Error::Config(_) | Error::Empty(_) => 2,
            Error::Format { .. } | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }
}
