//! Crate-wide error type.
//!
//! Variants split into two families that the CLI maps to exit codes:
//! input/validation problems (exit 1) and runtime failures (exit 2).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("patch region selects no faces")]
    EmptyPatch,

    #[error("vertex {0} has no incident face")]
    IsolatedVertex(usize),

    #[error("vertex {0} is a boundary vertex and was excluded (interior_only)")]
    BoundaryVertex(usize),

    #[error("no vertices to evaluate")]
    EmptyVertexSet,

    #[error("point set is empty")]
    EmptyPointSet,

    #[error("meshes have different face lists (topology mismatch)")]
    TopologyMismatch,

    #[error("{path}:{line}: {msg}")]
    MalformedFile {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("need at least {required} {kind} pairs, got {got}")]
    InsufficientPairs {
        kind: String,
        required: usize,
        got: usize,
    },

    #[error("{path}: {msg}")]
    Validation { path: String, msg: String },

    #[error("non-finite loss at iteration {iteration} ({context}); config: {config}")]
    NonFiniteLoss {
        iteration: usize,
        context: String,
        config: String,
    },

    #[error("non-finite probe value in finite-difference check")]
    NonFiniteProbe,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn validation(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 1 for bad inputs, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DimensionMismatch { .. }
            | Error::EmptyPatch
            | Error::IsolatedVertex(_)
            | Error::BoundaryVertex(_)
            | Error::EmptyVertexSet
            | Error::EmptyPointSet
            | Error::TopologyMismatch
            | Error::MalformedFile { .. }
            | Error::InsufficientPairs { .. }
            | Error::Validation { .. }
            | Error::Json(_) => 1,
            Error::ZeroVector
            | Error::NonFiniteLoss { .. }
            | Error::NonFiniteProbe
            | Error::Io(_) => 2,
        }
    }
}
