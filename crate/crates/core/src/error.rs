use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what}[{index}] = {value} is negative")]
    NegativeComponent {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{what} did not converge after {iterations} iterations (last estimate {last})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        last: f64,
    },

    #[error("best response of vertex {vertex} is unbounded")]
    Unbounded { vertex: usize },

    #[error("derivative of u_{vertex} never turns negative below {limit}; utility is not concave enough")]
    BracketFailed { vertex: usize, limit: f64 },

    #[error("smoothing parameter mu must be positive for a Lipschitz bound")]
    ZeroSmoothing,

    #[error("{0} requires p = q = 2")]
    UnsupportedNorm(&'static str),

    #[error("non-finite {what} at component {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("connection {0} has no related vertices but is the most violated constraint")]
    EmptyRow(usize),

    #[error("no productive steps were taken")]
    NoProductiveSteps,

    #[error("protocol deadlock: {0}")]
    Deadlock(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("residual cache diverged at connection {row}: cached {cached}, actual {actual}")]
    Consistency { row: usize, cached: f64, actual: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
