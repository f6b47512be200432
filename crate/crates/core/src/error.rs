use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Debug, Error)]
pub enum AstraeaError {
    /// Matrix/grid dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument is outside its valid domain (empty mask, n = 0 draw, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A stateful structure was used before it was ready (cold cache read).
    #[error("state error: {0}")]
    State(String),
    /// Configuration is inconsistent or infeasible.
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AstraeaError>;

impl AstraeaError {
    pub fn shape(msg: impl Into<String>) -> Self {
        AstraeaError::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        AstraeaError::Domain(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        AstraeaError::State(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        AstraeaError::Config(msg.into())
    }
    pub fn parse(msg: impl Into<String>) -> Self {
        AstraeaError::Parse(msg.into())
    }
}
