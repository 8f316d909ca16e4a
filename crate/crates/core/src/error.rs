use thiserror::Error;

/// Errors produced by the planning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("state {state} is an obstacle")]
    Obstacle { state: usize },

    #[error("solver did not converge within {iterations} iterations (last gap {gap:e})")]
    NotConverged { iterations: usize, gap: f64 },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("unknown policy handle {0}")]
    UnknownPolicy(usize),

    #[error("goal {0} has no grounding in the ensemble")]
    Ungrounded(usize),

    #[error("task is infeasible from the given start")]
    Infeasible,

    #[error("step budget of {0} exceeded")]
    StepBudget(usize),

    #[error("problem exceeds the solver budget: {0}")]
    Budget(String),

    #[error("transfer refused: {0}")]
    TransferRefused(String),

    #[error("{path}: {message}")]
    File { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
