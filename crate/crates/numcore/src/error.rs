use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {what}: {detail}")]
    Shape {
        op: &'static str,
        what: String,
        detail: String,
    },
    #[error("{op}: index {index} out of range for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            what: what.into(),
            detail: detail.into(),
        }
    }
}
