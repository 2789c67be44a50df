use std::path::PathBuf;

use crate::model::{ModelId, ParallelismStrategy};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient samples for {model}/{strategy}: got {got}, need at least {need}")]
    InsufficientSamples {
        model: ModelId,
        strategy: ParallelismStrategy,
        got: usize,
        need: usize,
    },

    #[error("ill-conditioned fit for {model}/{strategy}: {reason}")]
    IllConditioned {
        model: ModelId,
        strategy: ParallelismStrategy,
        reason: String,
    },

    #[error("no throughput profile for {model}/{strategy}")]
    MissingProfile {
        model: ModelId,
        strategy: ParallelismStrategy,
    },

    #[error("unknown model `{0}`")]
    UnknownModel(ModelId),

    #[error("policy routed request {request} to invalid instance {instance}")]
    InvalidRouting { request: u64, instance: usize },

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("mismatched report axes: {0}")]
    MismatchedAxes(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
