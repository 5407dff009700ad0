//! CLI error with a stable process exit code.
//!
//! 0 success, 2 config error, 3 calibration, 4 training, 5 pairing,
//! 6 missing traces; 1 for anything else (I/O).

use std::fmt;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        Self { code: 2, message }
    }

    pub fn calibration(message: String) -> Self {
        Self { code: 3, message }
    }

    pub fn training(message: String) -> Self {
        Self { code: 4, message }
    }

    pub fn pairing(message: String) -> Self {
        Self { code: 5, message }
    }

    pub fn traces(message: String) -> Self {
        Self { code: 6, message }
    }

    pub fn io(message: String) -> Self {
        Self { code: 1, message }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}
