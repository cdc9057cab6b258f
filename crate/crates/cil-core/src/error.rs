use thiserror::Error;

/// Errors surfaced by timeline construction, model wiring and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class set violation: {0}")]
    ClassSet(String),

    #[error("timeline split mismatch: {total} classes cannot be split into base {base} plus increments of {increment} (remainder {remainder})")]
    TimelineSplit {
        total: usize,
        base: usize,
        increment: usize,
        remainder: usize,
    },

    #[error("exemplar request exceeds pool: requested {requested}, available {available}")]
    ExemplarCount { requested: usize, available: usize },

    #[error("missing component: {0}")]
    MissingComponent(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
