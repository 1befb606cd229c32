//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variables belong to different computation graphs")]
    GraphMismatch,

    #[error("empty batch passed to {0}")]
    EmptyBatch(String),

    #[error("unknown target '{0}'; valid targets: swissroll, circles, rings, moons, 8gaussians, pinwheel, 2spirals, checkerboard")]
    UnknownTarget(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("non-finite {loss} at generator step {step}; parameter norms: {param_norms:?}")]
    NonFinite {
        loss: String,
        step: u64,
        param_norms: Vec<(String, f64)>,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
