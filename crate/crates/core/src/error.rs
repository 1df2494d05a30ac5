use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs or outputs do not match a module's port schema, or an
    /// operation was called outside its preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A trace could not be given positive probability.
    #[error("degenerate trace: {0}")]
    DegenerateTrace(String),

    #[error("cycle detected in module network involving node `{0}`")]
    Cycle(String),

    #[error("dangling port: {0}")]
    DanglingPort(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("node `{0}` has not been initialized")]
    Uninitialized(String),

    #[error("state space too large: {0} configurations (limit {1})")]
    StateSpaceTooLarge(u128, u128),

    #[error("conditioning on an event of probability zero")]
    ZeroProbability,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
