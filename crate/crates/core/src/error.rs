use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("axis {axis} out of range for rank {rank}")]
    BadAxis { axis: usize, rank: usize },

    #[error("degenerate output: {0}")]
    DegenerateOutput(String),

    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },

    #[error("reduction ratio {r} does not divide channel count {channels}")]
    BadReduction { r: usize, channels: usize },

    #[error("channel count must be at least 1, got {0}")]
    BadChannelCount(usize),

    #[error("kernel size {0} must be odd and positive")]
    BadKernel(usize),

    #[error("depth {depth} is not valid for {family}")]
    BadDepth { family: String, depth: usize },

    #[error("backward called without a matching forward pass")]
    StaleCache,

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite update at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
