// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::io;

use crate::stats::NeuronId;

/// Errors produced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed binary stream. `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Structured-text document (manifest, selection, report, header) failed to
    /// parse or validate.
    #[error("invalid document: {0}")]
    Document(String),

    /// Caller-supplied argument outside its contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Operands whose shapes or bound manifests disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A 64-bit counter would wrap.
    #[error("counter overflow: {0}")]
    Overflow(String),

    /// Numeric input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A planted neuron failed its construction or empirical verification.
    #[error("planting failed for neuron {neuron}: {reason}")]
    Plant { neuron: NeuronId, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Self::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn doc(message: impl Into<String>) -> Self {
        Self::Document(message.into())
    }

    pub(crate) fn arg(message: impl Into<String>) -> Self {
        Self::InvalidArgument(message.into())
    }

    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Self::Shape(message.into())
    }

    /// True for errors caused by malformed data rather than bad arguments.
    pub fn is_data_format(&self) -> bool {
        matches!(
            self,
            Self::Format { .. } | Self::Document(_) | Self::Overflow(_)
        )
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Self::Document(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Self::Document(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Self::Document(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
