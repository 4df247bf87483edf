use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: byte {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: u64,
        msg: String,
    },
    #[error("{what}: line {line}: {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] nartts_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit status: 1 usage/configuration, 2 data or file format,
    /// 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use nartts_core::Error as C;
        match self {
            Error::Usage(_) | Error::Core(C::Config(_)) => 1,
            Error::Core(C::Numeric(_)) => 3,
            _ => 2,
        }
    }
}
