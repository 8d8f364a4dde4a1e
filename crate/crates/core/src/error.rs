use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid space: {0}")]
    InvalidSpace(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("order mismatch: {left} vs {right}")]
    OrderMismatch { left: usize, right: usize },
    #[error("kernels live on different spaces")]
    SpaceMismatch,
    #[error("cell index {index} out of range for {cells} cells")]
    IndexOutOfRange { index: usize, cells: usize },
    #[error("order {0} exceeds the supported maximum")]
    OrderTooLarge(usize),
    #[error("kernel is not symmetric")]
    NotSymmetric,
    #[error("kernel has mass on a diagonal")]
    NotDiagonalFree,
    #[error("out of range: {0}")]
    Range(String),
    #[error("expansion is not centered (mean {0})")]
    NotCentered(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numerical guard: {0}")]
    Guard(String),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;
