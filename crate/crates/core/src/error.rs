use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("no router for task {0} in layer {1}")]
    MissingRouter(u32, usize),

    #[error("invalid state: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
