//! Dense 64-bit tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
mod graph;
mod ops;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use ops::{
    cross_entropy, erf, gelu, gelu_grad, layer_norm, matmul, matmul_nt, matmul_tn, softmax_rows,
    LN_EPS, MASKED_LOGIT,
};
pub use tensor::Tensor;
