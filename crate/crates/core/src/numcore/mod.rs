//! Dense float64 tensors with reverse-mode differentiation.

pub mod fmath;
pub mod gradcheck;
pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradReport};
pub use rng::Rng;
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
