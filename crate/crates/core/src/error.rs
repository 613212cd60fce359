use thiserror::Error;

/// Failure of a forward map on a single input.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForwardError {
    #[error("L96 blow-up at step {step}")]
    Blowup { step: usize },
    #[error("linear solve failed (residual {residual:e})")]
    Solver { residual: f64 },
    #[error("non-finite input")]
    NonFiniteInput,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnkiError {
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error("prior covariance is singular; use solve_map_dual instead")]
    SingularPrior,
    #[error("dual system solve failed: residual {residual:e}, condition estimate {condition:e}")]
    DualSolve { residual: f64, condition: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("forward map failed on particle {particle}: {source}")]
    Forward {
        particle: usize,
        #[source]
        source: ForwardError,
    },
    #[error("divergence detected at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("fixed-point iteration did not converge after {iterations} iterations")]
    FixedPointStalled { iterations: usize },
    #[error("alpha guard exhausted after {retries} increases of eps_delta")]
    GuardExhausted { retries: usize },
    #[error("eps = {eps:e} outside the validity range (0, {eps_max:e}] of the bound")]
    EpsOutOfRange { eps: f64, eps_max: f64 },
    #[error("objective is NaN over the whole bracket")]
    NanObjective,
}

pub type Result<T> = std::result::Result<T, EnkiError>;
