use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A location or parameter lies outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs violate an operation's preconditions (length mismatch, negative intensity, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    /// A leaf carries no quadrature mass, so its score is unbounded.
    #[error("degenerate leaf: T = 0")]
    DegenerateLeaf,

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
