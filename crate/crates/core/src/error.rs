use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("block at element {index} is partially zero; tensor is not blockwise-pruned")]
    UnalignedSparsity { index: usize },

    #[error("corrupt sparse stream: {0}")]
    CorruptStream(String),

    #[error("bad package magic")]
    BadMagic,

    #[error("malformed package: {0}")]
    MalformedPackage(String),

    #[error(
        "resource budget exceeded: storage {storage} B (limit {storage_limit} B), \
         memory {memory} B (limit {memory_limit} B)"
    )]
    BudgetExceeded {
        storage: usize,
        storage_limit: usize,
        memory: usize,
        memory_limit: usize,
    },

    #[error("search space rejected: acceptance probability {0:.3} is not above 0.9")]
    SpaceRejected(f64),

    #[error("no sampled model satisfies the resource budgets")]
    NoFeasibleSample,

    #[error("every sampled supernet was skipped")]
    NoFeasibleSupernet,

    #[error("no single-path model satisfies the resource budgets")]
    NoFeasibleModel,

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("evaluator failed: {0}")]
    Evaluator(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
