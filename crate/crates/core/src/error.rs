use thiserror::Error;

use crate::constellation::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid constellation: {}", join_violations(.0))]
    InvalidConstellation(Vec<Violation>),

    #[error("invalid channel parameter `{field}`: {reason}")]
    InvalidChannel { field: &'static str, reason: String },

    #[error("invalid problem data: {0}")]
    InvalidProblem(String),

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("every output grid column fell below the probability floor {floor:e}")]
    DegenerateGrid { floor: f64 },

    #[error("internal error: pruning would break central symmetry at grid node {index}")]
    AsymmetricPrune { index: usize },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("numerical failure at iteration {iteration}: {reason}")]
    NumericalFailure { iteration: usize, reason: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("problem too large for dense {what}: {size} exceeds cap {cap}")]
    UnsupportedSize {
        what: &'static str,
        size: usize,
        cap: usize,
    },

    #[error("maximizer pinned at the bracket edge s = {s_max} after growth cap")]
    UnboundedBracket { s_max: f64 },

    #[error("dual value below the oracle optimum at iteration {iteration}: e = {error:e}")]
    InconsistentOracle { iteration: usize, error: f64 },

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
