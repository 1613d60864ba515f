use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Every fallible operation returns [`Result`]; shape problems carry enough
/// context (op name plus the offending dimensions) to be actionable without a
/// debugger.
#[derive(Error, Debug)]
pub enum Error {
    #[error("{op}: shape mismatch: {msg}")]
    ShapeMismatch { op: &'static str, msg: String },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}:{line}: label parse error: {msg}")]
    LabelParse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("image {path}: {msg}")]
    Image { path: String, msg: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            msg: msg.into(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArg {
            op,
            msg: msg.into(),
        }
    }
}
