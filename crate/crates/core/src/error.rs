use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("ingestion error for frame `{frame}`: {message}")]
    Ingestion { frame: String, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("subset size {requested} exceeds dataset `{dataset}` of size {available}")]
    SubsetSize {
        dataset: String,
        requested: usize,
        available: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint manifest mismatch:\n  {}", .0.join("\n  "))]
    ManifestMismatch(Vec<String>),

    #[error("degenerate prediction: {0}")]
    Degenerate(String),

    #[error("no evaluated pixels: {0}")]
    EmptyEvaluation(String),

    #[error("sample `{sample}`: {source}")]
    Sample {
        sample: String,
        #[source]
        source: Box<Error>,
    },

    #[error("time window [{t0}, {t1}] is outside the power log span [{start}, {end}]")]
    Range { t0: f64, t1: f64, start: f64, end: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("power log line {line}: {message}")]
    PowerLog { line: usize, message: String },

    #[error("cannot account MACs for layer `{layer}` of kind `{kind}`")]
    Accounting { layer: String, kind: String },

    #[error("training diverged at {context}; diagnostic checkpoint written to {}", .checkpoint.display())]
    Divergence { context: String, checkpoint: PathBuf },

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor backend: {0}")]
    Backend(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_sample(self, sample: impl Into<String>) -> Self {
        Error::Sample {
            sample: sample.into(),
            source: Box::new(self),
        }
    }
}
