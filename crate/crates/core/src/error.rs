use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("asymmetric matrix (max |A - A^T| = {0:.3e})")]
    Asymmetric(f64),
    #[error("non-finite entry at position {0}")]
    NonFinite(usize),
    #[error("matrix is not SPD (failed at pivot {0})")]
    NotSpd(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate bandwidth: all samples identical")]
    DegenerateBandwidth,
    #[error("kernel spec mismatch between operators")]
    KernelSpecMismatch,
    #[error("unlabeled sample at index {0}")]
    Unlabeled(usize),
    #[error("invalid label {label} (class count {classes})")]
    InvalidLabel { label: i64, classes: usize },
    #[error("degenerate DU objective: only one class present")]
    DegenerateDu,
    #[error("vector is not on the probability simplex (sum = {0})")]
    NotSimplex(f64),
    #[error("QP did not converge after {iters} iterations (residual {residual:.3e})")]
    QpNonConvergence { iters: usize, residual: f64 },
    #[error("training diverged at epoch {0}: loss is not finite")]
    Diverged(usize),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("negative discrepancy {0:.3e} beyond cancellation tolerance")]
    NegativeDiscrepancy(f64),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
