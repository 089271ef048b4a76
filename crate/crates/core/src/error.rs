use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A row of the explicit update would get a negative diagonal entry.
    #[error("stability violation in row {row}: dtau * sum(k) = {load:.6} exceeds 1")]
    Stability { row: usize, load: f64 },

    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    Convergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(
        "normal matrix is not identifiable (condition {condition:.3e}); parameters in the null space: {indices:?}"
    )]
    Identifiability { condition: f64, indices: Vec<usize> },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code class used by the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Dimension(_) | Error::Parse(_) => 2,
            Error::Stability { .. }
            | Error::Divergence { .. }
            | Error::Convergence { .. }
            | Error::Numerical(_)
            | Error::Identifiability { .. } => 3,
            Error::Io(_) => 4,
        }
    }
}
