use thiserror::Error;

/// Errors produced by the engine, the verifier and the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("position {position} exceeds the model's maximum of {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("cosine similarity is undefined for two zero vectors")]
    UndefinedSimilarity,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("plan needs {needed} devices but only {available} are configured")]
    Capacity { needed: usize, available: usize },

    #[error("acceptance rate must be positive to model throughput")]
    UndefinedThroughput,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
