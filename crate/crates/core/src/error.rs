use thiserror::Error;

/// Errors raised by the solvers, the simulator and the I/O helpers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite input")]
    NonFinite,
    #[error("domain: {0}")]
    Domain(String),
    #[error("numeric overflow")]
    NumericOverflow,
    #[error("infeasible objective")]
    InfeasibleObjective,
    #[error("cavi requires alpha > 1")]
    CaviAlpha,
    #[error("degenerate batch")]
    DegenerateBatch,
    #[error("invalid sparsity: s = {s} exceeds p = {p}")]
    InvalidSparsity { s: usize, p: usize },
    #[error("unknown config: {0}")]
    UnknownConfig(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
