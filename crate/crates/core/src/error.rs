use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GcgpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GcgpError {
    /// Malformed input data or configuration.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Cholesky of the condensed covariance failed even after jitter escalation.
    #[error(
        "singular kernel: factorization failed after jitter {jitter:e}; smallest pivots at condensed nodes {nodes:?}"
    )]
    SingularKernel { jitter: f64, nodes: Vec<usize> },

    #[error("non-finite value in stage `{stage}`{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        stage: &'static str,
        step: Option<usize>,
    },
}

impl GcgpError {
    pub fn validation(msg: impl Into<String>) -> Self {
        GcgpError::Validation(msg.into())
    }

    pub fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        GcgpError::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures caused by the numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            GcgpError::SingularKernel { .. } | GcgpError::NonFinite { .. }
        )
    }
}
