use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("{op} over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("numeric contract violated: {0}")]
    Numeric(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NanGradient { param: String },

    #[error("non-finite loss at step {step} (lr = {lr:e})")]
    NanLoss { step: usize, lr: f64 },

    #[error("batch of size {0} is too small (need at least 2)")]
    BatchSize(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("version mismatch in field `{field}`: checkpoint has {found}, expected {expected}")]
    Version {
        field: String,
        expected: String,
        found: String,
    },

    #[error("refusing to write into non-empty directory {0} (use force)")]
    NonEmptyDir(PathBuf),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::NonEmptyDir(_) | Error::Image(_) => 3,
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

impl From<hound::Error> for Error {
    fn from(err: hound::Error) -> Self {
        match err {
            hound::Error::IoError(e) => Error::Io(e),
            hound::Error::FormatError(msg) => Error::Format(msg.to_string()),
            hound::Error::Unsupported => Error::Format("unsupported WAV encoding".into()),
            other => Error::Format(other.to_string()),
        }
    }
}
