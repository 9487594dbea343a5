//! Dense `f64` tensors and a tape-based reverse-mode differentiator.

mod finite_diff;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_grad, max_relative_error, relative_error};
pub use tape::{top_k_indices, Fault, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tensor::kernels;
