//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod broadcast;
mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, max_relative_error, numeric_gradient, relative_error};
pub use tape::{softplus, BinaryOp, ReduceOp, Tape, UnaryOp, Var};
pub use tensor::Tensor;
