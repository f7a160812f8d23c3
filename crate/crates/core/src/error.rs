use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by validation and numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric: |m[{row},{col}] - m[{col},{row}]| = {delta:.3e}")]
    NotSymmetric { row: usize, col: usize, delta: f64 },

    #[error("matrix diagonal entry {index} is {value}, expected 1")]
    NotUnitDiagonal { index: usize, value: f64 },

    #[error("matrix is not positive semidefinite (pivot {index} = {pivot:.3e})")]
    NotPositiveSemidefinite { index: usize, pivot: f64 },

    #[error("dimension mismatch: {context} has length {got}, expected {expected}")]
    DimensionMismatch {
        context: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("dimension {dim} exceeds the supported maximum of {max}")]
    DimensionTooLarge { dim: usize, max: usize },

    #[error("invalid region: lower bound {lower} >= upper bound {upper} at index {index}")]
    EmptyRegion { index: usize, lower: f64, upper: f64 },

    #[error("invalid parameter {name}: {value} (must satisfy {constraint})")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },

    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),

    #[error("invalid analysis schedule: {0}")]
    InvalidSchedule(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("design matrix is rank deficient: column {column} ({name}) is collinear")]
    RankDeficient { column: usize, name: String },

    #[error("root bracketing failed: {context} (f({lo}) = {f_lo:.3e}, f({hi}) = {f_hi:.3e})")]
    BracketFailure {
        context: &'static str,
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("inconsistent statistic path: {0}")]
    InconsistentPath(String),

    #[error("alpha spending: {0}")]
    Spending(String),

    #[error("simulation: {0}")]
    Simulation(String),
}
