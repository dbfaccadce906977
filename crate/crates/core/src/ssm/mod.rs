//! Diagonal state-space layers: discretization, selective scans, the
//! convolutional LTI form, and the bidirectional block built on them.

mod attention;
mod lti;
mod scan;
mod vim;
mod zoh;

use thiserror::Error;

use crate::tensor::TensorError;

pub use attention::{attention_block_forward, multi_head_attention, AttentionWeights};
pub use lti::{lti_kernel, lti_kernel_apply, lti_recurrence, LtiKernel};
pub use scan::{
    compose, scan_backward, scan_forward, selective_scan, selective_scan_parallel,
    selective_scan_parallel_raw, selective_scan_sequential, ScanArgs, ScanDims, ScanGrads,
    SelectiveScanOp, SsmParams, CHUNK,
};
pub use vim::{vim_block_forward, DirectionWeights, ScanMode, VimDims, VimWeights, LN_EPS};
pub use zoh::zoh_discretize;

#[derive(Debug, Error)]
pub enum SsmError {
    #[error("step size must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("{0} heads do not divide model width {1}")]
    HeadsDontDivide(usize, usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = SsmError> = std::result::Result<T, E>;

/// Scan direction: `Backward` runs over the reversed sequence and reverses
/// the output back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn is_reverse(self) -> bool {
        self == Direction::Backward
    }
}
