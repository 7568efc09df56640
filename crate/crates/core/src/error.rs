use thiserror::Error;

#[derive(Debug, Error)]
pub enum TcaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("condensation contract violated at block {block}: {detail}")]
    Contract { block: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TcaError> = std::result::Result<T, E>;
