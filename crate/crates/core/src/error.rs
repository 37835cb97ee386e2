// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, XcError>;

/// All failures surfaced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum XcError {
    /// Caller supplied an out-of-range or inconsistent argument.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A score is undefined for the given input (e.g. empty collection).
    #[error("undefined score: {0}")]
    Undefined(String),

    /// A configuration is incomplete or contradictory.
    #[error("configuration error: {0}")]
    Config(String),

    /// Line-numbered parse failure in an input file.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Lookup of an unknown language code.
    #[error("unknown language code `{0}`")]
    UnknownLanguage(String),

    /// A domain invariant was violated (e.g. malformed template).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// A word cannot be segmented with the vocabulary.
    #[error("cannot tokenize `{0}` with this vocabulary")]
    Tokenize(String),

    /// Donor/target mismatch in an activation patch.
    #[error("patch error: {0}")]
    Patch(String),

    /// Non-finite value during a forward or backward pass.
    #[error("non-finite value in {location}")]
    Numeric { location: String },

    /// Training diverged.
    #[error("training diverged at step {step}: loss is {loss}")]
    Training { step: usize, loss: f64 },

    /// Interchange or checkpoint schema version mismatch.
    #[error("version error: {0}")]
    Version(String),

    /// A trace set lacks a layer, record or file required by an analysis.
    #[error("incomplete trace set: {0}")]
    Trace(String),

    /// Long-running computation was cancelled.
    #[error("cancelled after {completed} of {total} steps")]
    Cancelled { completed: usize, total: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl XcError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn numeric(location: impl Into<String>) -> Self {
        Self::Numeric {
            location: location.into(),
        }
    }
}
