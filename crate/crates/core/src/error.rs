use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not skew-symmetric: symmetric part {sym_norm:.3e} exceeds tolerance")]
    NotSkew { sym_norm: f64 },

    #[error("matrix is not a rotation: orthogonality error {ortho_err:.3e}, det {det:.6}")]
    NotRotation { ortho_err: f64, det: f64 },

    #[error("gravitational potential is singular: sphere distance {distance:.3e}")]
    SingularPotential { distance: f64 },

    #[error("step too large: h*|J^-1 Pi| = {value:.6} must stay below 1")]
    StepTooLarge { value: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("weight matrix is not symmetric positive definite: {0}")]
    SingularWeight(&'static str),

    #[error("singular jacobian in {what} (condition number {cond:.3e})")]
    SingularJacobian { what: &'static str, cond: f64 },

    #[error("reached {iterations} iterations with boundary error {error:.3e}")]
    MaxIterations { iterations: usize, error: f64 },

    #[error("infeasible subproblem: {0}")]
    InfeasibleSubproblem(String),

    #[error("invalid input `{field}`: {message}")]
    Invalid { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for the solver failures that map to a non-converged run rather
    /// than a bad input.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::MaxIterations { .. }
                | Error::SingularJacobian { .. }
                | Error::InfeasibleSubproblem(_)
                | Error::StepTooLarge { .. }
        )
    }
}
