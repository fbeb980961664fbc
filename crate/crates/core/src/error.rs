use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("checkpoint does not match model: {}", .0.join("; "))]
    CheckpointMismatch(Vec<String>),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
