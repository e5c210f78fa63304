use thiserror::Error;

use mathgen_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("illegal character {ch:?} at offset {pos}")]
    IllegalChar { ch: char, pos: usize },
    #[error("empty equation")]
    EmptyEquation,
    #[error("unbalanced parentheses")]
    UnbalancedParens,
    #[error("multi-letter identifier `{0}`")]
    MultiLetterIdentifier(String),
    #[error("equation set uses {0} distinct variables (at most 3 supported)")]
    TooManyVariables(usize),
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty graph after filtering")]
    EmptyGraph,
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("decode exceeded maximum length {0}")]
    MaxLength(usize),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
