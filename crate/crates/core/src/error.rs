use thiserror::Error;

/// Errors raised by the planning and verification pipeline.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("state became non-finite at t = {time}")]
    Divergence { time: f64 },

    #[error("time {t} outside the horizon [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("contraction parameter c < 0 requires the discretisation parameter dt")]
    MissingDt,

    #[error("obstacle {obstacle} needs {needed} covering spheres, budget is {budget}; raise the cover tolerance")]
    CoverBudget {
        obstacle: usize,
        needed: usize,
        budget: usize,
    },

    #[error("cover check failed for obstacle {obstacle}: {escapes} sampled points escape the sphere cover")]
    CoverEscape { obstacle: usize, escapes: usize },

    #[error("eroded safe set excludes the {which} state: inflated obstacle {obstacle} at t = {time}")]
    InfeasibleErosion {
        which: &'static str,
        obstacle: usize,
        time: f64,
    },

    #[error("Jacobian evaluation failed: {0}")]
    Jacobian(String),

    #[error("scenario: {0}")]
    Scenario(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
