//! Reverse-mode automatic differentiation over `f64` tensors.

mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheck};
pub use graph::{AttnLayout, CustomBackward, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
