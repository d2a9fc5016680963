use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LidError> = std::result::Result<T, E>;

/// Every failure the toolkit can report. The CLI maps each variant to a
/// distinct process exit code via [`LidError::exit_code`].
#[derive(Debug, Error)]
pub enum LidError {
    #[error("malformed file name {name:?}: {reason}")]
    MalformedName { name: String, reason: String },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("registry mismatch: artifact was built for {expected}, current registry is {found}")]
    RegistryMismatch { expected: String, found: String },

    #[error("unsupported file format or version: {0}")]
    VersionMismatch(String),

    #[error("non-finite loss {loss} in batch {batch} (max |grad| = {max_grad})")]
    NonFiniteLoss { batch: usize, loss: f64, max_grad: f64 },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("batch {batch} is missing classes {missing:?}")]
    Stratification { batch: usize, missing: Vec<String> },

    #[error("language code {0:?} is already registered")]
    DuplicateCode(String),

    #[error("need at least {required} examples, got {got}")]
    InsufficientExamples { required: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("artifact directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl LidError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LidError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class. 0 is success and 2 is
    /// reserved for command-line usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            LidError::Config(_) | LidError::Range(_) => 3,
            LidError::Io { .. } | LidError::Locked(_) | LidError::Serde(_) => 4,
            LidError::Decode { .. } => 5,
            LidError::MalformedName { .. } | LidError::InsufficientData(_) => 6,
            LidError::VersionMismatch(_) | LidError::RegistryMismatch { .. } => 7,
            LidError::Shape(_) => 8,
            LidError::NonFiniteLoss { .. } => 9,
            LidError::DegenerateBatch(_) | LidError::Stratification { .. } => 10,
            LidError::DuplicateCode(_) | LidError::InsufficientExamples { .. } => 11,
            LidError::EmptyInput(_) => 12,
        }
    }
}

impl From<serde_json::Error> for LidError {
    fn from(e: serde_json::Error) -> Self {
        LidError::Serde(e.to_string())
    }
}
