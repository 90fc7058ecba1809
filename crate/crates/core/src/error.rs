use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("ensemble member {member} failed: {source}")]
    MemberFailed {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{method} (seed {seed}) failed: {source}")]
    JobFailed {
        method: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("model has not been trained")]
    Untrained,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("integrity check failed for {}: {reason}", .path.display())]
    Integrity { path: PathBuf, reason: String },

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {}: {message}", .path.display())]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True when the root cause is a numeric failure (divergence or non-finite values).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Divergence { .. } | Error::NonFiniteActivation { .. } => true,
            Error::MemberFailed { source, .. } | Error::JobFailed { source, .. } => {
                source.is_numeric()
            }
            _ => false,
        }
    }

    pub fn is_missing_artifact(&self) -> bool {
        match self {
            Error::MissingArtifact(_) => true,
            Error::MemberFailed { source, .. } | Error::JobFailed { source, .. } => {
                source.is_missing_artifact()
            }
            _ => false,
        }
    }
}
