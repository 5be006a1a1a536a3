use std::path::PathBuf;

/// Errors surfaced by the training stack.
#[derive(Debug, thiserror::Error)]
pub enum AkbeError {
    /// Invalid configuration or malformed input shape.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called outside its contract (e.g. a terminal action
    /// passed to the environment transition).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A recorded artifact does not replay against the world it claims to
    /// come from.
    #[error("data error: {0}")]
    Data(String),
    /// The tool-call budget was exhausted.
    #[error("turn budget exhausted at turn {turn} (max_turns = {max_turns})")]
    Budget { turn: usize, max_turns: usize },
    /// Non-finite loss or gradient.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AkbeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AkbeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            AkbeError::Config(_) => 2,
            AkbeError::Numeric(_) => 3,
            AkbeError::Io { .. } => 4,
            // Malformed user-supplied files are bad input.
            AkbeError::Data(_) => 2,
            // Contract and budget errors are internal bugs.
            AkbeError::Contract(_) | AkbeError::Budget { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, AkbeError>;
