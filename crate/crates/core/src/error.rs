use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of an operation
    /// (e.g. a rank outside `[1..m]`, `a > b` in a binomial coefficient).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent input shapes or identifiers.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// Input data violates an operation's precondition
    /// (e.g. non-distinct scores with tie-breaking disabled).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A fitted covariance matrix could not be inverted.
    #[error("singular covariance matrix: {0}; consider the ridge regularization option")]
    SingularCovariance(String),

    /// An enumeration or table would exceed its size bound.
    #[error("size bound exceeded: {0}")]
    SizeBound(String),
}

pub type Result<T> = std::result::Result<T, Error>;
