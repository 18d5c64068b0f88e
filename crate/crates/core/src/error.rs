use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Where in a simulation a numerical failure happened.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FailureSite {
    pub round: Option<usize>,
    pub client: Option<usize>,
}

impl fmt::Display for FailureSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.round, self.client) {
            (Some(r), Some(c)) => write!(f, " (round {r}, client {c})"),
            (Some(r), None) => write!(f, " (round {r})"),
            (None, Some(c)) => write!(f, " (client {c})"),
            (None, None) => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum FlicError {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape { what: &'static str, expected: usize, actual: usize },

    #[error("non-finite {quantity}{site}")]
    Numerical { quantity: &'static str, site: FailureSite },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid IDX data: {0}")]
    Format(String),

    #[error("truncated IDX payload: expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("not enough base samples: need {needed}, have {available}")]
    Capacity { needed: usize, available: usize },

    #[error("node {0} is not covered by the partition")]
    Coverage(usize),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("diagnostic unavailable: {0}")]
    DiagnosticUnavailable(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FlicError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FlicError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FlicError::Io { path: path.into(), source }
    }

    /// Attaches round/client context to a numerical failure; other errors pass through.
    pub fn at(self, round: Option<usize>, client: Option<usize>) -> Self {
        match self {
            FlicError::Numerical { quantity, site } => FlicError::Numerical {
                quantity,
                site: FailureSite { round: round.or(site.round), client: client.or(site.client) },
            },
            other => other,
        }
    }
}

pub type Result<T, E = FlicError> = std::result::Result<T, E>;
