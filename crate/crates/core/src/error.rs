use std::path::PathBuf;

use sonotag_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("taxonomy: {0}")]
    Taxonomy(String),

    #[error("unknown system id {0} (expected 1, 2 or 3)")]
    UnknownSystem(u32),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav {path}: {reason}")]
    Wav { path: PathBuf, reason: String },

    #[error("dsp: {0}")]
    Dsp(String),

    #[error("feature cache {path}: {reason}")]
    FeatureCache { path: PathBuf, reason: String },

    #[error("augment: {0}")]
    Augment(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("model: {0}")]
    Model(String),

    #[error("metadata out of range: {0}")]
    Metadata(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("loss: {0}")]
    Loss(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error("annotations {path}, line {line}: {reason}")]
    Annotations {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged { epoch: usize, step: u64, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
