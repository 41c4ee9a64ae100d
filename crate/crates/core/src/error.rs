use std::path::PathBuf;

/// Errors produced anywhere in the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its contract.
    #[error("configuration error: {0}")]
    Config(String),

    /// Text contains a character the vocabulary cannot represent.
    #[error("symbol {symbol:?} at char index {index} is not in the vocabulary")]
    Encoding { symbol: char, index: usize },

    /// A sequence does not fit in the model's context window.
    #[error("sequence of length {len} exceeds the context window of {window}")]
    ContextOverflow { len: usize, window: usize },

    /// Two buffers that must agree in length do not.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A NaN or infinity showed up where a finite value is required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A record was refused because it violates an invariant.
    #[error("record rejected: {0}")]
    Rejected(String),

    /// The error pool has nothing to hand out.
    #[error("error pool is empty")]
    EmptyPool,

    /// A line-oriented file could not be parsed.
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A checkpoint is missing, truncated, or written by an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
