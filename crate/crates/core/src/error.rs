use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite numerical input: {0}")]
    NumericalInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("optimizer state error: {0}")]
    OptimizerState(String),

    #[error("empty input text")]
    EmptyInput,

    #[error("tokenization error: {0}")]
    Tokenization(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("cipher coverage error: word {0:?} has no substitution")]
    Coverage(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint integrity error in tensor {tensor:?}: {message}")]
    Integrity { tensor: String, message: String },

    #[error("stale embedding cache: built for checkpoint {found}, expected {expected}")]
    StaleCache { expected: String, found: String },

    #[error("translation failed on example {index}: {message}")]
    Translation { index: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
