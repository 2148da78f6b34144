use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DuetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DuetError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("numeric divergence at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl DuetError {
    pub fn shape(msg: impl Into<String>) -> Self {
        DuetError::Shape(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        DuetError::Input(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        DuetError::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DuetError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        DuetError::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the CLI: 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            DuetError::Numeric(_) | DuetError::Diverged { .. } => 2,
            _ => 1,
        }
    }
}
