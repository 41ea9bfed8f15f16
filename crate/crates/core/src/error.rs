use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("non-finite coordinate ({x}, {y})")]
    NonFinitePoint { x: f64, y: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("query point ({x}, {y}) lies outside the {width}x{height} frame")]
    QueryOutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("model failed on clip {clip} window {window}: {source}")]
    WindowFailed {
        clip: String,
        window: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("every label became unmappable under augmentation")]
    Unmappable,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("bad .flo magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("invalid dimensions {width}x{height}")]
    BadDimensions { width: i64, height: i64 },

    #[error("missing input {0}")]
    MissingInput(PathBuf),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
