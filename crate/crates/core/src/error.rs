use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("corrupted delta: {0}")]
    CorruptedDelta(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no helpers supplied")]
    NoHelpers,

    #[error("no embeddings to index")]
    NoEmbeddings,

    #[error("client {0} has not been embedded yet")]
    NotYetEmbedded(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
