use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: field `{field}` is negative ({value})")]
    Range {
        line: usize,
        field: &'static str,
        value: i64,
    },

    #[error("{kind} id {id} out of range (< {bound})")]
    Index {
        kind: &'static str,
        id: usize,
        bound: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Tags a numeric error with the meta-task it occurred in.
    pub(crate) fn at_task(self, t: usize) -> Self {
        match self {
            Error::Numeric(m) => Error::Numeric(format!("task t={t}: {m}")),
            other => other,
        }
    }
}
