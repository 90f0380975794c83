use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {layer}: expected {expected}, found {found}")]
    Shape {
        layer: String,
        expected: String,
        found: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("empty {0}")]
    Empty(String),
    #[error("reference transcript is empty")]
    EmptyReference,
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("transcriber failed on record {id}: {message}")]
    Transcriber { id: String, message: String },
    #[error("invalid embedding for {id}: norm {norm}")]
    NonUnitEmbedding { id: String, norm: f64 },
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("missing clip {0}")]
    MissingClip(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            layer: layer.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
