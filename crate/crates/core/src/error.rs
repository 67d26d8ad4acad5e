use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A condition the algorithms guarantee cannot happen did happen.
    #[error("internal logic error: {0}")]
    InternalLogic(String),

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The decode loop exceeded its iteration safety valve.
    #[error("decode aborted: {0}")]
    Abort(String),

    /// A trajectory log that analysis cannot use.
    #[error("analysis input: {0}")]
    AnalysisInput(String),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
