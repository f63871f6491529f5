use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular matrix (pivot magnitude {pivot:.3e})")]
    SingularMatrix { pivot: f64 },

    #[error("matrix is not positive definite (pivot {pivot:.3e})")]
    NotPositiveDefinite { pivot: f64 },

    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
    },

    #[error("Kronecker product of size {rows}x{cols} exceeds the cap of {cap}")]
    DimensionOverflow {
        rows: usize,
        cols: usize,
        cap: usize,
    },

    #[error("Lyapunov equation for {which} could not be solved: {reason}")]
    LyapunovFailure { which: &'static str, reason: String },

    #[error("Riccati iteration did not converge within {iterations} iterations (last change {last_change:.3e})")]
    RiccatiNonConvergence { iterations: usize, last_change: f64 },

    #[error("model failed validation: {0}")]
    InvalidModel(String),

    #[error("QCQP infeasible: minimum constraint value {min_value:.6} exceeds budget {eps:.6}")]
    Infeasible { min_value: f64, eps: f64 },

    #[error("no previous MPC solution is available (k = 0)")]
    MissingPreviousSolution,

    #[error("solver failure at k = {k}, x = {x:?}, eps = {eps}: {source}")]
    SolverFailure {
        k: usize,
        x: Vec<f64>,
        eps: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("no feasible initial state after {attempts} draws")]
    InitialStateExhausted { attempts: usize },

    #[error("model file: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}
