use std::io;
use std::path::{Path, PathBuf};

use crate::binio::FormatError;
use crate::numerics::NumericsError;
use crate::prototypes::PrototypeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid stream: {0}")]
    Stream(String),
    #[error("numerical failure at batch {batch}: {source}")]
    NumericalAbort {
        batch: usize,
        #[source]
        source: NumericsError,
    },
}

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
