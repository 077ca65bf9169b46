//! Dense tensors and a small reverse-mode differentiation engine.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamReport, REL_ERR_FLOOR};
pub use graph::{Gradients, Graph, Var, COSINE_EPS, LAYER_NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tensor::gemm;
