use thiserror::Error;

/// Error taxonomy shared by the whole crate.
///
/// `Config` and `Data` are caused by user input (bad config keys, malformed
/// CSV, unseen categories) and map to CLI exit code 2. `Shape` and `Internal`
/// indicate a bug or violated invariant inside the pipeline.
#[derive(Debug, Error)]
pub enum NptError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, NptError>;

impl NptError {
    pub fn config(msg: impl Into<String>) -> Self {
        NptError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        NptError::Data(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        NptError::Shape(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        NptError::Internal(msg.into())
    }
}
