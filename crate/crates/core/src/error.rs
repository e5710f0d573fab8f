use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("degenerate particle system: {0}")]
    DegenerateWeights(String),

    #[error("non-finite state at {context}")]
    NonFinite { context: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("enumeration guard exceeded: {0} states")]
    EnumerationGuard(u64),

    #[error("unknown verification suite '{name}', available: {available}")]
    UnknownSuite { name: String, available: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code classification: 2 config, 3 numerical degeneracy, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSchedule(_)
            | Error::InvalidConfig(_)
            | Error::ShapeMismatch(_)
            | Error::EnumerationGuard(_)
            | Error::UnknownSuite { .. } => 2,
            Error::DegenerateKernel(_) | Error::DegenerateWeights(_) | Error::NonFinite { .. } => {
                3
            }
            Error::Io(_) | Error::Serde(_) | Error::Checkpoint(_) => 4,
        }
    }
}
