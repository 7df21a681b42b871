//! Tensors, matrix kernels and the autodiff tape.

mod gradcheck;
pub(crate) mod linalg;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradReport, FD_STEP};
pub use tape::{BatchStats, ConvGeom, CustomBackward, Gradients, Tape, Var, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
pub use tensor::Tensor;
