use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("scale overflow: exp({0}) is not representable")]
    ScaleOverflow(f64),
    #[error("degenerate scale component {0} (below 1e-12 after activation)")]
    DegenerateScale(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("mismatched lengths: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite gradient for gaussian {index}, attribute {attribute}")]
    PoisonedStep {
        index: usize,
        attribute: &'static str,
    },
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(u64),
    #[error("usage: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
