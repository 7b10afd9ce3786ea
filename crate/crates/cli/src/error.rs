use thiserror::Error;

use gearkdv_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Config(String),

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("acceptance check failed: {}", .0.join("; "))]
    Acceptance(Vec<String>),
}

impl RunError {
    pub fn config(msg: impl Into<String>) -> Self {
        RunError::Config(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => 1,
            RunError::Numerical(_) => 2,
            RunError::Acceptance(_) => 3,
        }
    }
}

impl From<CoreError> for RunError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::BlowUp { .. } => RunError::Numerical(e.to_string()),
            other => RunError::Config(other.to_string()),
        }
    }
}
