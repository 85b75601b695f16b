use thiserror::Error;

/// Unified error type for the whole library.
///
/// Variants are grouped by failure class so the CLI can map them onto exit
/// codes: anything IO/format/config-shaped is a data error, anything produced
/// by diverging numerics is a numeric failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid config: {0}")]
    InvalidConfig(String),

    #[error("grid shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("probability {0} outside [0, 1] or not finite")]
    InvalidProbability(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prediction instant {t_pred} s outside hypothesis horizon [{t_min}, {t_max}] s")]
    TimeOutOfRange { t_pred: f64, t_min: f64, t_max: f64 },

    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("malformed {what} at byte offset {offset}: {detail}")]
    Format {
        what: &'static str,
        offset: usize,
        detail: String,
    },

    #[error("config hash mismatch: bundle was trained for {bundle}, dataset is {dataset}")]
    ConfigHashMismatch { bundle: String, dataset: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by diverging numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
