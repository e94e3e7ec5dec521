//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration,
//! 3 numeric failure, 4 corrupt artifact.

use std::fmt;

use mrf_core::Error;

pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_CORRUPT: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Failure::new(EXIT_USAGE, message)
    }

    pub fn corrupt(message: impl Into<String>) -> Self {
        Failure::new(EXIT_CORRUPT, message)
    }

    pub fn io(context: impl fmt::Display, err: std::io::Error) -> Self {
        Failure::usage(format!("{context}: {err}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::Numeric(_) | Error::UndefinedMetric(_) => EXIT_NUMERIC,
            Error::Checkpoint(_) => EXIT_CORRUPT,
            _ => EXIT_USAGE,
        };
        Failure::new(code, err.to_string())
    }
}
