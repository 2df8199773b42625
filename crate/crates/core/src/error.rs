use thiserror::Error;

use crate::inverse::InverseSolution;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("survival curve violates P0 at index {index}: {reason}")]
    P0Violation { index: usize, reason: String },

    #[error("slope window [{t1}, {t2}] holds fewer than two knots")]
    EmptyWindow { t1: f64, t2: f64 },

    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),

    #[error("compatibility residual of order 2 needs a nonzero survival slope at t=0")]
    DegenerateSlope,

    #[error("stencil overrun at index {index} (axis length {len})")]
    StencilOverrun { index: usize, len: usize },

    #[error("point ({x}, {t}) lies outside the grid")]
    OutOfDomain { x: f64, t: f64 },

    #[error("explicit step violates CFL: dt={dt} > limit {limit}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("density went negative ({value}) at node {node}, slice {slice}")]
    NonpositiveDensity { slice: usize, node: usize, value: f64 },

    #[error("Monte Carlo needs at least 1000 paths, got {0}")]
    InvalidPaths(usize),

    #[error("non-finite path value at step {step}")]
    NonfinitePath { step: usize },

    #[error("spatial truncation too tight: {0}")]
    TruncationTooTight(String),

    #[error("Newton failed on slice {slice}: residual {residual:e}")]
    NewtonDivergence { slice: usize, residual: f64 },

    #[error("bounds violated on slice {slice}, node {node}: {detail}")]
    BoundsViolation { slice: usize, node: usize, detail: String },

    #[error("penalty schedule exhausted without continuation convergence (last difference {last_diff:e})")]
    ScheduleExhausted { last_diff: f64, solution: Box<InverseSolution> },

    #[error("scaling function lost positivity: min K = {min_k:e}")]
    PositivityLoss { min_k: f64 },

    #[error("level z={z} not reached on slice t={t}")]
    LevelNotReached { z: f64, t: f64 },

    #[error("Y_z = {value:e} left the a-priori band [{lower:e}, {upper:e}] at t={t}")]
    GradientCollapse { t: f64, value: f64, lower: f64, upper: f64 },

    #[error("empty neighbourhood at t={t}, delta={delta}")]
    EmptyNeighborhood { t: f64, delta: f64 },

    #[error("degenerate regression: {0}")]
    DegenerateRegression(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error at row {row}: {msg}")]
    Csv { row: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Input and configuration problems, as opposed to solver failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::P0Violation { .. }
                | Error::EmptyWindow { .. }
                | Error::InvalidPaths(_)
                | Error::InvalidInput(_)
                | Error::Config(_)
                | Error::Csv { .. }
                | Error::TruncationTooTight(_)
                | Error::OutOfDomain { .. }
        )
    }
}
