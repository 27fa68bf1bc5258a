use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("malformed {field}: {message}")]
    Format { field: &'static str, message: String },

    #[error("partition failed: {0}")]
    Partition(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// `U` has no value when the aggregate gradient is exactly zero.
    #[error("bound constant U is undefined for a zero gradient")]
    UndefinedU,

    #[error("internal error: {0}")]
    Internal(String),

    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
