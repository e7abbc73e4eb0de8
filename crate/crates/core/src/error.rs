use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not an MVOL file")]
    NotMvol,

    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("malformed header at byte {offset}: {message}")]
    Header { offset: usize, message: String },

    #[error("non-finite data")]
    NonFinite,

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("no slices")]
    NoSlices,

    #[error("inconsistent slice shapes: {0}")]
    InconsistentSlices(String),

    #[error("bad slice indices: {0}")]
    SliceIndex(String),

    #[error("degenerate intensity range")]
    DegenerateRange,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("need at least 2 subjects")]
    NotEnoughSubjects,

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
