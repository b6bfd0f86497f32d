use thiserror::Error;

/// Errors raised by the numerical routines.
///
/// Configuration problems (bad inputs, mismatched grids, failed schema checks)
/// are kept apart from numerical failures so callers can map them to
/// different exit statuses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("time {time} is not a node of the grid (dt = {dt})")]
    OffGrid { time: f64, dt: f64 },

    #[error("non-finite value at grid node {node}: {what}")]
    Numeric { node: usize, what: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("value field below obstacle by {gap:e} at node {node} (tolerance {tol:e})")]
    Dominance { node: usize, gap: f64, tol: f64 },

    #[error("newton iteration did not converge at time level {level}, worst node {node} (residual {residual:e})")]
    Solver {
        level: usize,
        node: usize,
        residual: f64,
    },

    #[error("insufficient sweep points: need at least {need}, got {got}")]
    InsufficientSweep { need: usize, got: usize },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("empty sample set: {0}")]
    EmptySamples(String),

    #[error("control outside the admissible class: {0}")]
    ControlClass(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the caller's inputs rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::GridMismatch(_)
                | Error::OffGrid { .. }
                | Error::InsufficientSweep { .. }
                | Error::ControlClass(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
