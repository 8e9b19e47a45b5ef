use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index {index} out of range for {bound} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid graph state: {0}")]
    State(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("weak instrument: first-stage F statistic {f_stat:.3} below {threshold}")]
    WeakInstrument { f_stat: f64, threshold: f64 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
