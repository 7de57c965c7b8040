use thiserror::Error;

use crate::metrics::MetricError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error("instance `{id}` has no human score for aspect `{aspect}`")]
    MissingAspect { id: String, aspect: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures that originate in a metric or the bridge to it.
    pub fn is_metric_error(&self) -> bool {
        matches!(self, Error::Metric(_))
    }
}
