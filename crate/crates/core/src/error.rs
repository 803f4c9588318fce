use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty training set")]
    EmptyData,

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("prediction covariance is not symmetric positive definite")]
    NonInvertibleCovariance,

    #[error("invalid rank {rank}: must be at most {max}")]
    InvalidRank { rank: usize, max: usize },

    #[error("prior scale must be positive and finite, got {0}")]
    InvalidPriorScale(f64),

    #[error("invalid budget: k = {k} exceeds batch size {m}")]
    InvalidBudget { k: usize, m: usize },

    #[error("exact subset enumeration supports at most {max} inputs, got {m}")]
    EnumerationBound { m: usize, max: usize },

    #[error("batch index {index} out of range for a stream of {len} batches")]
    BatchIndexOutOfRange { index: usize, len: usize },

    #[error("improvement normalization undefined: baseline mean losses coincide")]
    UndefinedNormalization,

    #[error("batch {batch}: {source}")]
    AtBatch {
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("missing artifact {}: run `dlm fit` with the same --config, --out and --seeds first", path.display())]
    MissingArtifact { path: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from user configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArchitecture(_)
                | Error::InvalidRank { .. }
                | Error::InvalidPriorScale(_)
                | Error::InvalidBudget { .. }
        )
    }
}
