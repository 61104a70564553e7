use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("inter-sample time is undefined at the origin")]
    ZeroState,
    #[error("non-finite matrix entries while evaluating at s = {s}")]
    NumericOverflow { s: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("eigensolver failed: {0}")]
    Eigensolver(String),
    #[error("basis matrix is rank deficient")]
    RankDeficient,
    #[error("Jacobian undefined: state lies on a triggering tangency")]
    SingularJacobian,
    #[error("operation requires a {0} system")]
    WrongKind(&'static str),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("solver backend failure: {0}")]
    Backend(String),
    #[error("budget exhausted: {0}")]
    Budget(String),
    #[error("no cycle available: {0}")]
    NoCycle(String),
    #[error("empty sample")]
    EmptySample,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}
