//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_EPS};
pub use graph::{Bcast, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
