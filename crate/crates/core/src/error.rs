use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot normalize a zero vector (norm {norm:e})")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("count mismatch: expected {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss is not finite at the given parameters")]
    NonFiniteLoss,

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("no Frobenius-orthogonal rotation accepted after {attempts} attempts")]
    OrthogonalizationFailed { attempts: usize },

    #[error("corpus size {requested} is smaller than the target pool ({targets})")]
    CorpusTooSmall { requested: usize, targets: usize },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("corpus entry {index} is not unit norm (norm {norm})")]
    NonUnitEntry { index: usize, norm: f64 },

    #[error("brute-force matching supports m <= 9, got {0}")]
    TooLarge(usize),

    #[error("requested {requested} embeddings but the model supports at most {max}")]
    TooLong { requested: usize, max: usize },

    #[error("backward called without a recorded forward pass")]
    NoRecordedForward,

    #[error("positive document is not part of the batch")]
    PositiveNotInBatch,

    #[error("loss diverged (non-finite) at step {step}")]
    DivergedLoss { step: usize },

    #[error("target set is empty")]
    EmptyTargets,

    #[error("query {query} has a single target; pairwise statistics need at least two")]
    SingleTarget { query: usize },

    #[error("query {query} has a single prediction; pairwise statistics need at least two")]
    SinglePrediction { query: usize },

    #[error("target corpus id {id} is outside the corpus (n = {n})")]
    MissingCorpusIds { id: u64, n: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
