use thiserror::Error;

/// Errors raised by grid construction, solvers and estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("node {0} is not a boundary node")]
    NotOnBoundary(usize),

    #[error("transport solve failed to converge: {0}")]
    TransportSolve(Box<SolverFailure>),

    #[error("diffusion solve failed: {0}")]
    DiffusionSolve(String),

    #[error("prior rejection sampling exhausted after {attempts} consecutive rejections")]
    PriorRejection { attempts: usize },

    #[error("rate fit needs at least 4 positive points, got {positive} ({excluded} excluded)")]
    InsufficientRateData { positive: usize, excluded: usize },

    #[error("matrix is not symmetric positive definite ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps the error with a description of the task that produced it.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

/// Diagnostic record attached to a transport solve that did not converge.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverFailure {
    pub epsilon: f64,
    pub nodes: usize,
    pub ordinates: usize,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

impl std::fmt::Display for SolverFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let last = self.residual_history.last().copied().unwrap_or(f64::NAN);
        write!(
            f,
            "eps={} grid={} nodes x {} ordinates, {} iterations, final residual {:.3e}",
            self.epsilon, self.nodes, self.ordinates, self.iterations, last
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
