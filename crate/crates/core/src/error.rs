//! Error type shared across the pipeline.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, RecamError>;

#[derive(Debug, Error)]
pub enum RecamError {
    /// Invalid configuration (bad dataset spec, bad hyperparameter, schema violation).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Array shapes disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training produced a non-finite loss or parameter.
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    /// A downstream command was invoked before its upstream artifact exists.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    /// A serialized artifact is malformed.
    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RecamError {
    /// Stable machine-readable code, emitted on stderr by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            RecamError::Config(_) => "config",
            RecamError::Contract(_) => "contract",
            RecamError::Shape(_) => "shape",
            RecamError::Divergence { .. } => "divergence",
            RecamError::MissingArtifact(_) => "missing-artifact",
            RecamError::Format { .. } => "format",
            RecamError::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RecamError::Io { path: path.into(), source }
    }
}
