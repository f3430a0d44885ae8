//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Dimension mismatches carry the
//! operation name plus expected/got shapes so a failure deep inside a training
//! loop still points at the offending call.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between tensors or parameter stacks.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Malformed input data (CSV rows, checkpoints, manifests).
    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    /// Invalid or inconsistent configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// Numerical breakdown (non-finite loss, NaN gradients, empty reductions).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Wraps a failure with the pipeline stage it occurred in.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn dimension(
        context: &'static str,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::Dimension {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Name of the pipeline stage this error is tagged with, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_wrapping_preserves_source_message() {
        let inner = Error::Numerical("loss became NaN".into());
        let wrapped = inner.in_stage("stage_a");
        assert_eq!(wrapped.stage(), Some("stage_a"));
        let text = wrapped.to_string();
        assert!(text.contains("stage_a"));
        let source = std::error::Error::source(&wrapped).unwrap();
        assert!(source.to_string().contains("NaN"));
    }

    #[test]
    fn dimension_error_mentions_context() {
        let e = Error::dimension("matmul", "3x4", "3x5");
        assert!(e.to_string().contains("matmul"));
        assert!(e.to_string().contains("3x5"));
    }
}
