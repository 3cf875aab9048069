use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("alternative index {index} out of range (|J0| = {bound})")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("operation unsupported for this model: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("refused: {0}")]
    Refused(String),

    /// Iterative solver hit its safety cap. Carries the last iterate so
    /// callers can inspect diagnostics instead of losing all progress.
    #[error("did not converge: {context}")]
    NonConvergence { context: String, last: Vec<f64> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
