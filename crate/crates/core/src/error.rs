use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied parameters (grid, kernel, scheme settings).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("grid mismatch: expected M={expected}, got M={found}")]
    GridMismatch { expected: usize, found: usize },

    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("CG did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    /// `d·Ad <= 0` during CG: the operator is not positive definite.
    #[error("CG breakdown at iteration {iteration}: curvature {curvature:.3e}")]
    CgBreakdown { iteration: usize, curvature: f64 },

    #[error("dense system too large: N = {n} exceeds guard {guard}")]
    SizeGuard { n: usize, guard: usize },

    #[error("singular matrix in dense LU")]
    Singular,

    /// A discrete analogue of a theorem was falsified at run time.
    #[error("invariant violation at step {step}: {msg}")]
    Invariant { step: usize, msg: String },

    /// Wraps a lower-level failure with the step index at which it happened.
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn at_step(self, step: usize) -> Self {
        match self {
            e @ (Error::AtStep { .. } | Error::Invariant { .. }) => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// Strips step context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_invariant_violation(&self) -> bool {
        matches!(self.root(), Error::Invariant { .. })
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::Config(_) | Error::Parse { .. } | Error::GridMismatch { .. }
        )
    }
}
