use thiserror::Error;

/// Errors raised by simulation, differentiation and identification.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure in {context}: non-finite value")]
    NumericalFailure { context: String },

    #[error("algebraic solve did not converge at t={t}: |g|={residual:e} after {restarts} restarts")]
    AlgebraicConvergence { t: f64, residual: f64, restarts: usize },

    #[error("singular algebraic Jacobian at t={t}")]
    SingularJacobian { t: f64 },

    #[error("step size fell below h_min at t={t} (segment {segment})")]
    Stiffness { t: f64, segment: usize },

    #[error("no sign change of the event function in [{lo}, {hi}]")]
    Bracket { lo: f64, hi: f64 },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("post-event algebraic re-solve failed at event {event} (tau={tau})")]
    ReinitFailure { event: usize, tau: f64 },

    #[error("grazing event {event} at tau={tau}: guard rate {rate:e} (loss={loss})")]
    GrazingEvent { event: usize, tau: f64, rate: f64, loss: f64 },

    #[error("singular step Jacobian in adjoint sweep (segment {segment}, step {step})")]
    AdjointLinearFailure { segment: usize, step: usize },

    #[error("rank-deficient event Jacobian at event {event}")]
    DegenerateEvent { event: usize },

    #[error("trajectory residuals not feasible: max residual {residual:e}")]
    StaleTrajectory { residual: f64 },

    #[error("finite-difference probe for component {component} was non-finite")]
    OracleFailure { component: usize },

    #[error("setup error: {0}")]
    Setup(String),
}

impl Error {
    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, Error::InvalidArgument(_) | Error::Setup(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
