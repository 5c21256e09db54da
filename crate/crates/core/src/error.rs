use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training step {step} failed: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-deterministic function: two evaluations differ ({first} vs {second})")]
    Determinism { first: f64, second: f64 },

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    Truncation { len: usize, max: usize },

    #[error("catalog error: {0}")]
    Catalog(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("line {line}: {detail}")]
    Validation { line: usize, detail: String },

    #[error("spec error: {0}")]
    Spec(String),

    #[error("instance too large for exhaustive enumeration: {paths} paths (limit {limit})")]
    TooLarge { paths: f64, limit: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    /// True for errors caused by numbers rather than inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Determinism { .. } | Error::Diverged { .. })
    }

    /// True for errors caused by corpus content.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Vocabulary(_)
                | Error::Truncation { .. }
                | Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Spec(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Catalog(_))
    }
}
