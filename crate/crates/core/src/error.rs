use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("overlapping masks for classes {a} and {b}")]
    OverlappingMasks { a: u32, b: u32 },

    #[error("no styled frame for style `{style}` (assigned to class {class})")]
    MissingStyle { class: u32, style: String },

    #[error("no mask for assigned class {0}")]
    MissingMask(u32),

    #[error("unknown class id {0}")]
    UnknownClass(u32),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("model error: {0}")]
    Model(String),

    #[error("{stage} stage failed: {message}")]
    Stage { stage: String, message: String },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File { path: path.into(), message: message.to_string() }
    }
}
