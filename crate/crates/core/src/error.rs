use thiserror::Error;

use crate::TaskId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate gradient for task {task}: zero norm")]
    DegenerateGradient { task: TaskId },

    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    #[error("unknown task {0}")]
    UnknownTask(TaskId),

    #[error("task {0} already exists")]
    AlreadyExists(TaskId),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tick {tick} outside timeline range [{start}, {end}]")]
    OutOfRange { tick: u64, start: u64, end: u64 },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("memory buffer is empty")]
    EmptyMemory,

    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),

    #[error("numeric failure at tick {tick}: {message}")]
    TickFailure { tick: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
