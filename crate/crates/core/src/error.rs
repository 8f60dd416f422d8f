use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state {0:?} lies outside the domain box")]
    OutOfDomain(Vec<f64>),
    #[error("sampling exhausted after {attempts} attempts: {what}")]
    Exhausted { what: String, attempts: usize },
    #[error("fit failed: holdout contrast {0} is not positive")]
    FitFailed(f64),
    #[error("unsupported for scorer kind {kind}: {what}")]
    UnsupportedKind { kind: String, what: String },
    #[error("monotonicity violated: {0}")]
    NotMonotone(String),
    #[error("constraint filter rejected every state")]
    EmptyKept,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("merge refused: {0}")]
    MergeRefused(String),
    #[error("value iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
