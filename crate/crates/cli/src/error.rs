// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or unusable inputs. Exit code 2.
    Usage(String),
    /// Inputs exist but are malformed. Exit code 3.
    Data(String),
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self::Usage(message.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
        }
    }

    /// Prefix the message with what was being processed.
    pub fn context(self, what: impl fmt::Display) -> Self {
        match self {
            Self::Usage(m) => Self::Usage(format!("{what}: {m}")),
            Self::Data(m) => Self::Data(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Data(m) => f.write_str(m),
        }
    }
}

impl From<domain_neurons::Error> for CliError {
    fn from(e: domain_neurons::Error) -> Self {
        if e.is_data_format() {
            Self::Data(e.to_string())
        } else {
            Self::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Usage(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
