use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum DiceError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared in an objective, gradient or ratio.
    #[error("non-finite value in {what} (agent {agent:?})")]
    NonFinite { what: String, agent: Option<usize> },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DiceError {
    pub fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        DiceError::Dimension {
            context,
            expected,
            got,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        DiceError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DiceError>;
