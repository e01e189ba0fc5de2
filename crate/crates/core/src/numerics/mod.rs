//! Tensors, reverse-mode autodiff, scans and gradient checking.

mod gradcheck;
mod scalar;
mod scan;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use scalar::{Dtype, Scalar};
pub use scan::{scan_block_len, scan_parallel, scan_sequential, ScanElement};
pub use tape::{Gradients, ScanMode, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid tape usage: {0}")]
    Usage(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
