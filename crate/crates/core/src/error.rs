use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NanGradient(String),

    #[error("non-finite {what} at step {step}: {detail}")]
    NonFiniteLoss {
        what: &'static str,
        step: u64,
        detail: String,
    },

    #[error("malformed {kind} file at byte {offset}: {msg}")]
    Format {
        kind: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("label map `{map}` has no entry for raw id {id}")]
    UnmappedLabel { map: String, id: u16 },

    #[error("cloud `{0}` already carries unified labels")]
    AlreadyUnified(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
