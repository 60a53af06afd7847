//! Representative-token mining for prompt-tuned vision-language
//! classification.
//!
//! Visual tokens are scored against class text embeddings and a per-class
//! prototype memory bank, the top-scoring tokens are split into two tiers,
//! and each tier is fused with the class prototypes (cross-attention plus a
//! frozen transformer layer) and with the text embeddings (a residual linear
//! map). Classification runs on the fused representatives alone.
//!
//! Features come from a seeded synthetic generator or from `.spot` feature
//! files, standing in for frozen image and text encoders.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod error;
pub mod features;
pub mod memory_bank;
pub mod numerics;
pub mod objectives;
pub mod par;
pub mod pipeline;
pub mod representative;
pub mod rng;

pub use error::{Error, Result};
pub use numerics::Matrix;
