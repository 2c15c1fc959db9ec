use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("spatial size {height}×{width} not divisible by {divisor} (block depth {depth}); resize the input")]
    Resolution { height: usize, width: usize, depth: usize, divisor: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no disc region")]
    NoDiscRegion,

    #[error("no region to crop")]
    EmptyRegion,

    #[error("split error: {0}")]
    Split(String),

    #[error("manifest {path}: {} invalid row(s):\n{}", .errors.len(), .errors.join("\n"))]
    ManifestValidation { path: PathBuf, errors: Vec<String> },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("non-finite weights after epoch {0}")]
    NonFiniteWeights(usize),

    #[error("empty training split")]
    EmptyTrainSplit,

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }
}
