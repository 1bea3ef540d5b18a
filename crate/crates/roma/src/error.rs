use std::path::PathBuf;

/// Error type shared across the workbench.
#[derive(Debug, thiserror::Error)]
pub enum RomaError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, RomaError>;

impl RomaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RomaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code category for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            RomaError::Config(_) | RomaError::Input(_) | RomaError::Shape(_) => 2,
            RomaError::Io { .. } | RomaError::Parse { .. } => 3,
            RomaError::CheckpointMismatch(_) => 4,
            RomaError::Diverged(_) => 5,
        }
    }
}
