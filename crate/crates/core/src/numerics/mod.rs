//! Dense `f64` tensors and a small reverse-mode autodiff engine with the
//! operators an attention U-Net needs.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{sigmoid, Graph, OpKind, UpsampleMode, Var};
pub use kernels::ConvGeometry;
pub use tensor::Tensor;
