//! Byte-level CNN engine for the two detector architectures.
//!
//! Implements embedding lookup, forward pass, gradients with respect to
//! the embedded input (for attribution) and to the parameters (for the
//! toy trainer), plus a portable weight file format.  Weights and
//! cached activations are 32-bit; reductions accumulate in 64-bit.
//!
//! Everything here is deterministic: identical weights and input give
//! bit-identical outputs regardless of thread count, because nothing in
//! a single forward/backward is parallelized.

mod config;
mod gradcheck;
mod model;
mod tensor;
mod weights;

pub use config::{Arch, ConvBlock, LayerPlan, ModelConfig, OutputHead, TensorSpec};
pub use gradcheck::{gradcheck, GradCheckReport};
pub use model::{
    backward_input, backward_params, embed, forward, forward_bytes, window_tokens, ForwardCache,
    Prediction, ScoreTarget, PAD_TOKEN,
};
pub(crate) use model::backward_params_seeded;
pub use tensor::Tensor;
pub use weights::{load_weights, save_weights, WeightStore, WEIGHT_MAGIC};

use thiserror::Error;

/// Errors raised by the tensor/layer engine.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("token {token} out of range (vocab {vocab})")]
    TokenOutOfRange { token: u16, vocab: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("forward cache is stale for these weights")]
    StaleCache,
    #[error("forward cache lacks the token sequence needed for embedding gradients")]
    CacheMissingTokens,
    #[error("bad magic: not a weight file")]
    BadMagic,
    #[error("weight manifest does not match the model config: {0}")]
    ManifestMismatch(String),
    #[error("weight payload truncated: {0}")]
    TruncatedPayload(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}
