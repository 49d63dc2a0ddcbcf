use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OtocError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty supervision: no labeled points to train on")]
    EmptySupervision,
}

impl OtocError {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        OtocError::Format(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        OtocError::Validation(msg.into())
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            OtocError::Io(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, OtocError>;
