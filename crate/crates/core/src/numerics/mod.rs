//! Dense `f64` tensors and reverse-mode differentiation.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, RELATIVE_ERROR_GUARD};
pub use tape::{bce_with_logit, Gradients, Tape, Var};
pub use tensor::{argmax, l2_norm, linf_norm, max_excluding, Tensor};

