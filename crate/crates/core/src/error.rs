use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate frame: input vectors are zero or parallel")]
    DegenerateFrame,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value produced by `{op}`")]
    NonFiniteValue { op: String },

    #[error("invalid pattern id {0} (expected 1..=6)")]
    InvalidPattern(u8),

    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),

    #[error("pose graph node {0} has no outgoing edge")]
    IsolatedNode(usize),

    #[error("pose graph is disconnected")]
    DisconnectedGraph,

    #[error("malformed {kind} file {path}: {msg} (at {location})")]
    Parse {
        kind: &'static str,
        path: PathBuf,
        location: String,
        msg: String,
    },

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
