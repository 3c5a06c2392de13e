use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed input file.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid configuration value or key.
    #[error("config error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// Error surfaced from a named subsystem during an experiment run.
    #[error("{module}: {source}")]
    Module {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tag the error with the subsystem it came from.
    pub fn in_module(self, module: &'static str) -> Self {
        Error::Module {
            module,
            source: Box::new(self),
        }
    }
}
