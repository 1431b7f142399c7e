//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gemm;
mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gemm::{matmul, matmul_nt, matmul_tn};
pub use gradcheck::{finite_difference_check, GradCheckReport, REL_ERROR_FLOOR};
pub use param::{ParamGrads, ParamId, ParamStore, Parameter};
pub use tape::{CustomOp, Gradients, NodeId, Tape, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("{op} needs at least one element")]
    Empty { op: &'static str },
    #[error("cannot normalise a zero vector")]
    ZeroVector,
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loss has no recorded dependence on any trainable value")]
    DetachedLoss,
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEpsilon(f64),
}
