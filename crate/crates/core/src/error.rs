//! Crate-wide error type.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model dimensions, hyperparameters, or generator settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Mismatched lengths, out-of-range indices, or otherwise malformed arguments.
    #[error("argument error: {0}")]
    Argument(String),

    /// An observation symbol lies outside the model's alphabet.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// No state can emit the observed symbol; the forward pass cannot be scaled.
    #[error("degenerate observation: symbol {symbol} at position {position} has zero emission probability in every reachable state")]
    DegenerateObservation { position: usize, symbol: usize },

    #[error("training error: {0}")]
    Training(String),

    /// Non-finite likelihoods or vanished posterior mass during re-estimation.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A sequence is shorter than the truncation length it must support.
    #[error("short sample: length {length} < required {required}")]
    ShortSample { length: usize, required: usize },

    #[error("scaler fit error: {0}")]
    ScalerFit(String),

    #[error("ingestion error at {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("search error: {0}")]
    Search(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
