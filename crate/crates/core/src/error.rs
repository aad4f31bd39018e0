use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {path}:{line}: {msg}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("feature dimension mismatch for `{id}`: got {got}, expected {expected}")]
    DimensionMismatch {
        id: String,
        got: usize,
        expected: usize,
    },

    #[error("duplicate example id `{0}`")]
    DuplicateId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("fit failure: {0}")]
    Fit(String),

    #[error("unknown id `{0}` in selection")]
    UnknownId(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
