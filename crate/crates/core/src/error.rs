use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {point:?} is outside the open domain of `{model}`: {reason}")]
    Domain {
        model: String,
        point: Vec<f64>,
        reason: String,
    },

    #[error("partition function diverges at lambda = {lambda:?}")]
    DivergentPartition { lambda: Vec<f64> },

    #[error("quadrature did not reach tolerance {requested:e} (estimated error {achieved:e})")]
    QuadratureTolerance { requested: f64, achieved: f64 },

    #[error("Newton inversion did not converge after {iterations} iterations (residual trace {trace:?})")]
    NonConvergence { iterations: usize, trace: Vec<f64> },

    #[error("matrix is singular (condition number {condition:e})")]
    SingularMatrix { condition: f64 },

    #[error("finite-difference step underflows near the domain margin at {point:?}")]
    StepUnderflow { point: Vec<f64> },

    #[error("{rejects} proposals rejected at {point:?}; tau is too large for this point")]
    MaxRejects { rejects: usize, point: Vec<f64> },

    #[error("trajectory {trajectory}, step {step}: {source}")]
    Trajectory {
        trajectory: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("standard error {standard_error:e} of {quantity} exceeds 25% of target magnitude {target:e}")]
    InsufficientSamples {
        quantity: String,
        standard_error: f64,
        target: f64,
    },

    #[error("regression is rank deficient: {0}")]
    RankDeficient(String),

    #[error("time step {dt:e} violates the stability bound {limit:e}")]
    Cfl { dt: f64, limit: f64 },

    #[error("density became negative ({min:e}) at t = {t}")]
    NegativeDensity { min: f64, t: f64 },

    #[error("`{model}` has no fixed point: base measure is not normalizable")]
    NoFixedPoint { model: String },

    #[error("ODE trajectory left the domain at t = {t}")]
    LeftDomain { t: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
