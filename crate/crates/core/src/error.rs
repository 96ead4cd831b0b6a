use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{logical} not found (looked for `{archive}`)")]
    MissingTensor { logical: String, archive: String },

    #[error("tensor {name}: expected shape {expected:?}, found {actual:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("weights archive: {0}")]
    Archive(String),

    #[error("coordinate out of range: {0}")]
    Coordinate(String),

    #[error("sequence of {len} tokens exceeds context of {max}")]
    Length { len: usize, max: usize },

    #[error("token id {0} is outside the vocabulary")]
    TokenId(u32),

    #[error("cannot encode {0:?}: byte symbol missing from vocabulary")]
    Unencodable(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
