//! Dense numerical kernel: matrices, similarity, softmax, a pre-norm
//! transformer block, a small reverse-mode tape, and gradient checking.

pub mod block;
pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod tape;

pub use block::{BlockInit, LayerNormParams, TransformerBlockParams};
pub use gradcheck::{grad_check, grad_check_indices, GradCheckReport};
pub use matrix::{dot, norm, Matrix};
pub use ops::{
    argmax, compensated_sum, cosine, cosine_matrix, cross_entropy, kl_divergence, l2_normalize,
    mean_pool, normalize_rows, softmax,
};
pub use tape::{BlockVars, Grads, Tape, Var};

/// Free-function form of [`TransformerBlockParams::forward`].
pub fn transformer_block(
    q: &Matrix,
    kv: &Matrix,
    params: &TransformerBlockParams,
) -> crate::Result<Matrix> {
    params.forward(q, kv)
}
