use std::path::PathBuf;

/// Errors surfaced by the tokenizer, generator and tooling.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {stage} (index {index})")]
    NonFinite { stage: &'static str, index: usize },

    #[error("{what} out of range: {value} (valid: {valid})")]
    OutOfRange {
        what: &'static str,
        value: i64,
        valid: String,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("checkpoint mismatch:\n{0}")]
    CheckpointMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the CLI: 2 for invalid inputs or
    /// configuration, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Validation(_)
            | Error::Config(_)
            | Error::OutOfRange { .. }
            | Error::CheckpointMismatch(_) => 2,
            Error::NonFinite { .. } | Error::Format { .. } | Error::Io { .. } | Error::Tensor(_) => 3,
        }
    }
}

macro_rules! bail_shape {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Shape(format!($($arg)*)))
    };
}

macro_rules! bail_validation {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Validation(format!($($arg)*)))
    };
}

pub(crate) use bail_shape;
pub(crate) use bail_validation;
