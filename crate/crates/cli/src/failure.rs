//! Exit-code contract: 0 success, 2 config or usage, 3 filesystem
//! conflict, 4 numeric failure.

use std::fmt;

use spvae::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFLICT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFLICT,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }

    pub fn from_core(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } | Error::Training(_) | Error::Normalization(_) => Self::numeric(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }

    pub fn io(context: &str, e: std::io::Error) -> Self {
        Self::config(format!("{context}: {e}"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::from_core(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}
