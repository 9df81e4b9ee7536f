use crate::dde_sim::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The integrated state left the finite range. `partial` holds the samples
    /// recorded before the blow-up when the failure happened inside a rollout.
    #[error("state diverged at t = {time}")]
    Divergence {
        time: f64,
        partial: Option<Box<Trajectory>>,
    },

    #[error("delay coupling is singular (det = {det:e}); delay too large for the quadratic truncation")]
    SingularCoupling { det: f64 },

    #[error("constraint solve did not converge after {iterations} iterations (contraction estimate {contraction:.3})")]
    ConstraintSolve { iterations: usize, contraction: f64 },

    #[error("value function became non-finite at backward step {step} (CFL number {cfl:.3})")]
    Instability { step: usize, cfl: f64 },

    #[error("malformed value dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
