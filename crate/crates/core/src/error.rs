use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("relation ({u}, {v}) references an entity outside 0..{n_entities}")]
    DanglingEndpoint { u: u32, v: u32, n_entities: usize },

    #[error("relation set is empty")]
    EmptyRelations,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no forward trace for entity {0}")]
    MissingTrace(u32),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("insufficient samples: {0}")]
    Insufficient(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
