use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not fit together.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid model, layer or controller configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad data handed to an operation (label out of range, accuracy outside [0,1], ...).
    #[error("input error: {0}")]
    Input(String),

    /// API misuse, e.g. running backward twice on one graph.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite training loss {loss} at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("cannot ingest {}: {detail}", path.display())]
    Ingestion { path: PathBuf, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
