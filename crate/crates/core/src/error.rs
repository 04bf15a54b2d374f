use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("entropy coder: {0}")]
    Coder(String),

    #[error("{0}")]
    Stream(StreamError),

    #[error("planning error: {0}")]
    Plan(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Container parse failure with the byte offset (and frame chunk, when the
/// failure is inside one) where it was detected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamError {
    pub position: usize,
    pub chunk: Option<usize>,
    pub message: String,
}

impl fmt::Display for StreamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.chunk {
            Some(idx) => write!(
                f,
                "corrupt stream at byte {} (frame chunk {}): {}",
                self.position, idx, self.message
            ),
            None => write!(f, "corrupt stream at byte {}: {}", self.position, self.message),
        }
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn coder(msg: impl Into<String>) -> Self {
        Error::Coder(msg.into())
    }

    pub(crate) fn stream(position: usize, chunk: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Stream(StreamError {
            position,
            chunk,
            message: msg.into(),
        })
    }
}
