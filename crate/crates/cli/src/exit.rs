use std::fmt;

use ctlformer::Error;

pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const INTEGRITY: u8 = 4;
pub const NUMERIC: u8 = 5;

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: NUMERIC,
            message: message.into(),
        }
    }

    pub fn code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => IO,
            Error::Integrity { .. } | Error::Version { .. } => INTEGRITY,
            Error::NonFinite(_) | Error::Tensor(ctlformer::TensorError::NonFinite(_)) => NUMERIC,
            Error::Contract(_) | Error::Tensor(_) => USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}
