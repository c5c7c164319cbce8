use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in op #{op_index} ({op}): {detail}")]
    Shape {
        op_index: usize,
        op: &'static str,
        detail: String,
    },

    #[error("backward requires a scalar output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite intermediate in coupling layer {layer}")]
    NonFiniteLayer { layer: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("rows could not be parsed: {rows:?}")]
    BadRows { rows: Vec<usize> },

    #[error("channel {channel} has zero variance over the training range")]
    DegenerateChannel { channel: usize },

    #[error("flagged section [{start}, {end}) {reason}")]
    Section {
        start: usize,
        end: usize,
        reason: String,
    },

    #[error("reconstruction start {start}: {reason}")]
    ReconstructionStart { start: usize, reason: String },

    #[error("labels must contain both classes")]
    SingleClass,

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
