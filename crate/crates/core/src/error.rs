use thiserror::Error;

/// Errors raised by the mapping, planning, and learning layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },

    #[error("cell ({x}, {y}) is outside a {width}x{height} grid")]
    OutOfBounds {
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("node {node} has no outgoing primitive after velocity filtering")]
    IsolatedNode { node: usize },

    #[error("action {action} is not valid in the current state")]
    InvalidAction { action: usize },

    #[error("no valid action available")]
    NoValidAction,

    #[error("episode is not finished")]
    EpisodeNotDone,

    #[error("non-finite value {value} in {context}")]
    NonFinite { context: String, value: f64 },

    #[error("unknown planner `{0}`")]
    UnknownPlanner(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed input at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
