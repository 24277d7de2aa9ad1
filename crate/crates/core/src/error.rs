use std::path::Path;

use pilotforge_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid channel profile: {0}")]
    Profile(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid pilot pattern: {0}")]
    Pattern(String),
    #[error("pilot symbol at index {index} is zero")]
    ZeroPilot { index: usize },
    #[error("alpha must be strictly positive (index {index} is {value})")]
    NonPositiveAlpha { index: usize, value: f64 },
    #[error("{stage} training diverged at epoch {epoch}")]
    Diverged { stage: &'static str, epoch: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing {what}: {path}")]
    MissingArtifact { what: String, path: String },
    #[error("malformed {what} in {path}: {reason}")]
    Format {
        what: &'static str,
        path: String,
        reason: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code: 1 for validation problems, 2 for runtime or numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Profile(_)
            | Error::Pattern(_)
            | Error::Shape(_)
            | Error::MissingArtifact { .. }
            | Error::Format { .. } => 1,
            Error::Nn(NnError::Config(_)) | Error::Nn(NnError::Shape { .. }) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
