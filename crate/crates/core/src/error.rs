use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid constellation: {0}")]
    InvalidConstellation(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("symbol index {index} out of range for constellation of order {order}")]
    SymbolOutOfRange { index: usize, order: usize },

    #[error("symbol map is not closed over the constellation: {0}")]
    NotClosed(String),

    #[error("exhaustive search over {size} candidates exceeds budget {budget}")]
    BudgetExceeded { size: u128, budget: u128 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("model does not match problem: {0}")]
    SpecMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown tag `{0}`")]
    UnknownTag(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
