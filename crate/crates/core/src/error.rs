use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (stepping a finished
    /// episode, ingesting a malformed episode, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("buffer error: {0}")]
    Buffer(String),

    #[error("numerical error in {term}: {detail}")]
    Numerical { term: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Nn(#[from] nnkit::NnError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
