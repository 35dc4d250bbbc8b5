use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} is outside the schedule domain [{min}, {max}]")]
    TimeOutOfDomain { t: f64, min: f64, max: f64 },

    #[error("log-SNR {lambda} is outside the attainable range [{min}, {max}]")]
    LogSnrOutOfRange { lambda: f64, min: f64, max: f64 },

    #[error("unknown condition label `{0}`")]
    UnknownCondition(String),

    #[error("classifier-free guidance needs a prompt condition, got the unconditional branch")]
    GuidanceNeedsPrompt,

    #[error("time ordering violated: {0}")]
    Ordering(String),

    #[error("invalid segmentation: {0}")]
    Segmentation(String),

    #[error("invalid prior: {0}")]
    Prior(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid view transform: {0}")]
    View(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("non-finite value at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than numerics or I/O.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
