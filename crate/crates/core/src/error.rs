use std::path::PathBuf;

use cehr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: u64, msg: String },
    #[error("{file}:{line}: {msg}")]
    Integrity { file: String, line: u64, msg: String },
    #[error("empty store")]
    EmptyStore,
    #[error("unknown person `{0}`")]
    UnknownPerson(String),
    #[error("person `{0}` has no visits")]
    EmptyHistory(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("negative interval {0} days")]
    NegativeInterval(i64),
    #[error("nothing to mask: {0}")]
    NothingMaskable(&'static str),
    #[error("cohort `{name}`: {msg}")]
    Cohort { name: String, msg: String },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
