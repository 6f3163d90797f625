//! Dense tensors with reverse-mode gradients, the gated recurrent cell, masked
//! softmax and a finite-difference gradient checker.

pub mod gradcheck;
pub mod gru;
pub mod softmax;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GroupReport, HasParams};
pub use gru::GruCell;
pub use softmax::{argmax, masked_log_softmax, masked_softmax, MaskMode};
pub use tape::{Backward, Tape, Var};
pub use tensor::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("every entry of the distribution is masked")]
    AllMasked,
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("finite-difference epsilon {0} outside [1e-7, 1e-3]")]
    InvalidEpsilon(f64),
}
