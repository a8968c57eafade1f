use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("feature provider error: {0}")]
    Provider(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data has rank {achievable}, below the requested projection dimension {requested}")]
    ReducedRank { requested: usize, achievable: usize },

    #[error("training diverged on client {client} at epoch {epoch}: non-finite loss")]
    TrainingDiverged { client: usize, epoch: usize },

    #[error("missing feature store at {}: run `semanticfl extract-features --dataset {dataset} --provider synthetic --out {}` first", path.display(), path.display())]
    MissingStore { path: PathBuf, dataset: String },

    #[error("missing inputs: expected {}", .0.join(", "))]
    MissingInputs(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by a bad configuration rather than a failure at runtime.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidInput(_) | Error::MissingStore { .. }
        )
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
