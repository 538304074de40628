use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("insufficient history: need {need} states, got {got}")]
    InsufficientHistory { need: usize, got: usize },

    #[error("state ({x:.3}, {y:.3}, {v:.3}) lies outside the grid")]
    OutsideGrid { x: f64, y: f64, v: f64 },

    #[error("time step {dt} violates the CFL limit {limit}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("ego start state lies inside an obstacle")]
    InfeasibleStart,

    #[error("reachable tube is empty")]
    EmptyTube,

    #[error("episode log has no evaluated steps{0}")]
    EmptyLog(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
