//! Dense matrices and the autodiff tape the models are built on.

mod graph;
mod mat;

pub use graph::{AttentionSpec, ConvSpec, Gradients, Graph, Var};
pub(crate) use graph::softmax_masked;
pub use mat::{log_softmax_row, matmul, vec_mat_acc, Mat, Real};
