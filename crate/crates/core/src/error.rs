use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate vector: norm {norm:e} below threshold")]
    DegenerateVector { norm: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("batch too small: need at least 2 pairs, got {0}")]
    BatchTooSmall(usize),

    #[error("label error: {0}")]
    Label(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("parse error at line {line}: key `{key}`: {message}")]
    Parse {
        line: usize,
        key: String,
        message: String,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
