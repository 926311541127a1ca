use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("incompatible checkpoint: expected architecture `{expected}`, found `{found}`")]
    Compatibility { expected: String, found: String },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("page capacity exceeded: {requested} bubbles requested, at most {max} fit")]
    Capacity { requested: usize, max: usize },

    #[error("rectangle {rect:?} lies outside the {width}x{height} page")]
    OutOfBounds {
        rect: (usize, usize, usize, usize),
        width: usize,
        height: usize,
    },

    #[error("malformed input on line {line}: {detail}")]
    Csv { line: u64, detail: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }
}
