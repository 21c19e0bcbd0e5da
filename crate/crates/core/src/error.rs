use thiserror::Error;

/// Errors raised across the planning stack.
#[derive(Debug, Error)]
pub enum Error {
    /// The tractor heading reached the singular configuration `|theta1| >= pi/2`.
    #[error("model domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Every candidate controller failed to produce a usable plan.
    #[error("decision failure: {0}")]
    Decision(String),

    #[error("scenario sampling failed: {0}")]
    Sampling(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("no target lane for controller {0}")]
    NoTargetLane(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
