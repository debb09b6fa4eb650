use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LqaeError {
    /// Input that has no meaningful quantization, e.g. a zero-norm latent
    /// under L2-normalized lookup. Usually a sign of encoder collapse.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite values produced by {0}")]
    NumericFailure(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("cannot ingest {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("config error: {0}")]
    Config(#[from] crate::training::config::ConfigError),

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Completion(#[from] crate::fewshot::client::CompletionError),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LqaeError>,
    },
}

pub type Result<T, E = LqaeError> = std::result::Result<T, E>;

impl LqaeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LqaeError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        LqaeError::Format { path: path.into(), reason: reason.into() }
    }
}

/// Attaches a pipeline stage name to errors.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| LqaeError::Stage { stage, source: Box::new(e) })
    }
}
