use std::path::PathBuf;

use crate::tensor::TensorError;

/// Errors produced by posekit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A document failed validation; `location` is a JSON-path-like pointer.
    #[error("{location}: {message}")]
    Parse { location: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("scene {scene}: overlap target unsatisfiable after {attempts} resamples")]
    UnsatisfiableOverlap { scene: usize, attempts: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: total loss {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
