use std::path::PathBuf;

use crate::tensor::Shape4;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape4,
        rhs: Shape4,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0} contains non-finite values")]
    NonFinite(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error at row {row}: {message}")]
    DataRow { row: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Divergence { epoch: usize, step: usize },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
