use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("constraints unsatisfiable after {attempts} attempts: {detail}")]
    Unsatisfiable { attempts: usize, detail: String },
    #[error("cannot parse expression {text:?}: {msg}")]
    Parse { text: String, msg: String },
    #[error("dataset integrity: {0}")]
    Integrity(String),
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;
