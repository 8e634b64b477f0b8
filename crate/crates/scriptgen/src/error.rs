use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate task id `{id}`")]
    DuplicateTaskId { line: usize, id: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{0}")]
    Validation(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    Train(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
