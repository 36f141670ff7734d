use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or input violates an operation's contract.
    #[error("invalid {name}: {reason}")]
    Validation { name: String, reason: String },

    /// Tensor shapes do not line up.
    #[error("shape mismatch in {0}")]
    Shape(String),

    /// An operation was called on input that does not satisfy its precondition.
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Dataset discovery or decoding failed.
    #[error("ingestion error at {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {kind} file {path}: {reason}")]
    Format { kind: &'static str, path: PathBuf, reason: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, step {step}: {snapshot}")]
    NonFinite { epoch: usize, step: usize, snapshot: String },

    /// The proxy model never reached the requested accuracy band.
    #[error("no checkpoint reached training accuracy <= {target:.4}; closest was {closest:.4} at epoch {epoch}")]
    ProxyAccuracy { target: f64, closest: f64, epoch: usize },

    /// Synthetic data failed its separability requirement.
    #[error("calibration failed: {0}")]
    Calibration(String),

    /// An experiment stage failed; wraps the underlying error.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn validation(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation { name: name.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |e| Error::Stage { stage, source: Box::new(e) }
    }

    /// Process exit code grouping errors by category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Config(_) | Error::Precondition(_) => 2,
            Error::Io { .. } | Error::Ingest { .. } | Error::Format { .. } => 3,
            Error::Shape(_) | Error::NonFinite { .. } => 4,
            Error::ProxyAccuracy { .. } | Error::Calibration(_) => 5,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
