use thiserror::Error;

/// Errors raised by the tensor/tape engine.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input: {msg}")]
    InvalidValue { op: &'static str, msg: String },
    #[error("backward: root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("operation mixes tensors recorded on different tapes")]
    MixedTapes,
    #[error("{op}: index range {start}..{end} out of bounds for length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
}

/// Errors raised outside the numeric core: model construction, training,
/// experiments, and artifact IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config: {field}: {msg}")]
    Config { field: String, msg: String },
    #[error("negative embedding fingerprint {have} does not match encoder fingerprint {want}")]
    FingerprintMismatch { have: String, want: String },
    #[error("training diverged: {0} consecutive non-finite reward steps")]
    Diverged(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
