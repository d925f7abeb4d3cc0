//! Tensor substrate: dense arrays, forward kernels, reverse-mode autodiff,
//! finite-difference checking and the named-tensor archive.

mod archive;
mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use archive::Archive;
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use ops::{gelu, layernorm, matmul, matmul_nt, mul_count, reset_mul_count, softmax, softplus, transpose};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
