use thiserror::Error;

/// Errors produced by the estimation pipeline and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate rotation: parameter vector norm {norm:.3e} below {eps:.1e}")]
    DegenerateRotation { norm: f64, eps: f64 },

    #[error("rotation parameters violate unit-norm contract: |c| = {norm}")]
    NonUnitParams { norm: f64 },

    #[error("relative rotation is unconstrained: {0}")]
    UnconstrainedRotation(String),

    #[error("orientation graph is disconnected; unreachable nodes: {nodes:?}")]
    DisconnectedGraph { nodes: Vec<usize> },

    #[error("rank deficient system: {0}")]
    RankDeficient(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for parse/validation problems,
    /// 3 for solver rank/convergence problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::InvalidInput(_)
            | Error::InvalidArgument(_) => 2,
            Error::RankDeficient(_)
            | Error::Factorization(_)
            | Error::UnconstrainedRotation(_)
            | Error::DisconnectedGraph { .. }
            | Error::NoConvergence(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
