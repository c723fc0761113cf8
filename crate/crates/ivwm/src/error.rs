use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum IvwmError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: u32 },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad file format: {msg}")]
    Format { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, IvwmError>;

impl IvwmError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        IvwmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        IvwmError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        IvwmError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
