use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("invalid layer configuration: {0}")]
    Config(String),
    #[error("backward called without a recorded graph: {0}")]
    NoGraph(&'static str),
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

pub(crate) fn shape_err(
    op: &'static str,
    expected: impl Into<String>,
    got: impl Into<String>,
) -> NnError {
    NnError::Shape {
        op,
        expected: expected.into(),
        got: got.into(),
    }
}
