use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (unknown family, bad affinity, bad architecture, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller-supplied data violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),
    /// Operation invoked in the wrong lifecycle state (e.g. scoring twice).
    #[error("state error: {0}")]
    State(String),
    /// Numerical failure such as a non-finite gradient.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Malformed or mismatching persisted artifact.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
