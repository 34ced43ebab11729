use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("non-finite function value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },

    #[error("could not place patches without overlap after {attempts} attempts")]
    Placement { attempts: usize },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("unsupported data: {0}")]
    Unsupported(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("inconsistent constants: {0}")]
    InconsistentConstants(String),

    #[error("no valid queries: every label occurs exactly once")]
    NoValidQueries,

    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
