use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed record {}: {msg}", path.display())]
    Malformed { path: PathBuf, msg: String },

    #[error("version mismatch in {}: expected {expected}, found {found}", path.display())]
    VersionMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("truncated file {}: {msg}", path.display())]
    Truncated { path: PathBuf, msg: String },

    #[error("missing pretrained weights: {0}")]
    MissingWeights(String),

    #[error("weights do not match model definition: {0}")]
    WeightsMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("optimizer state does not match weights: {0}")]
    StateMismatch(String),

    #[error("missing point associations: {0}")]
    MissingAssociations(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
