use thiserror::Error;

/// Errors raised by the reconstruction toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("constant image cannot be normalized (all values equal {0})")]
    ConstantImage(f64),

    #[error("invalid dimensions: {0}")]
    BadDims(String),

    #[error("non-finite sample in {0}")]
    NonFinite(&'static str),

    #[error("ACS entry ({row}, {col}) lies outside the sampling mask")]
    AcsNotSampled { row: usize, col: usize },

    #[error("image dimensions {height}x{width} not divisible by 2^{depth}")]
    DimsNotDivisible {
        height: usize,
        width: usize,
        depth: usize,
    },

    #[error("non-finite gradient at parameter index {0}")]
    NonFiniteGradient(usize),

    #[error("training diverged at epoch {epoch}")]
    Divergence {
        epoch: usize,
        last_good: Box<crate::learn::NetParams>,
    },

    #[error("learned method requested without trained parameters")]
    MissingParams,

    #[error("image {height}x{width} smaller than the {window}x{window} window")]
    TooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("bad file: {0}")]
    BadFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::ShapeMismatch(what.into())
}
