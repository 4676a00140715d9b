//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in layer {layer}: {what}")]
    NonFinite { layer: usize, what: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty panel: {0}")]
    EmptyPanel(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("insufficient history: need {needed} observations, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("bankruptcy: wealth fell to {wealth}")]
    Bankruptcy { wealth: f64 },

    #[error("degenerate reward window: zero dispersion")]
    DegenerateReward,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular design matrix")]
    SingularDesign,

    #[error("did not converge after {iterations} iterations (last change {last_change:e})")]
    Convergence { iterations: usize, last_change: f64 },

    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("state error: {0}")]
    State(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Parse { .. }
            | Error::EmptyPanel(_)
            | Error::Integrity(_)
            | Error::Coverage(_)
            | Error::Range(_)
            | Error::Alignment(_)
            | Error::InsufficientHistory { .. }
            | Error::Schedule(_)
            | Error::Io { .. }
            | Error::Csv(_) => 3,
            Error::Shape(_)
            | Error::NonFinite { .. }
            | Error::Numeric(_)
            | Error::Bankruptcy { .. }
            | Error::DegenerateReward
            | Error::Degenerate(_)
            | Error::SingularDesign
            | Error::Convergence { .. }
            | Error::Estimator(_)
            | Error::State(_) => 4,
        }
    }
}
