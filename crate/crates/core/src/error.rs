use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed distribution, grid or experiment parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// An exact computation was refused because it would be too large.
    #[error("refused: {0}")]
    Refused(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
