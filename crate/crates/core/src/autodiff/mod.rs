//! Dense tensors with a reverse-mode tape.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use tensor::{matmul_nt, matmul_raw, matmul_tn};
