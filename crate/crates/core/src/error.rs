//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not line up (matrix product, network input, dataset records).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A layer whose weight matrix collapsed to zero cannot be normalized.
    #[error("degenerate layer {layer}: weight matrix has zero induced norm")]
    DegenerateLayer { layer: usize },

    /// Parameter outside its mathematical domain (e.g. discount factor).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported policy head: {0}")]
    UnsupportedHead(String),

    /// Loss or parameters went non-finite during optimization.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A trainer ran out of budget before reaching its quality threshold.
    #[error("training failure: {0}")]
    TrainingFailure(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    /// A file does not match the container schema or its recorded hash.
    #[error("schema violation: {0}")]
    Schema(String),

    /// An attack artifact was trained for a different perturbation budget.
    #[error("budget mismatch: {0}")]
    BudgetMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
