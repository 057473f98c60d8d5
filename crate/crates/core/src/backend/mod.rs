//! Desk-scale generative networks: a hash-keyed text embedding stub, a
//! two-layer transformer with self- and cross-attention, the residual
//! sampler and a toy decoder.

mod decoder;
pub(crate) mod linalg;
mod sampling;
mod text;
mod transformer;

use ndarray::Array4;

pub use decoder::Decoder;
pub use sampling::sample_residual;
pub use text::{embed_text, embed_text_with_dim, DEFAULT_TEXT_DIM};
pub use transformer::{Architecture, TransformerWeights};

/// Query, key and value tensors of one self-attention layer, laid out
/// `(batch, heads, tokens, head_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub q: Array4<f64>,
    pub k: Array4<f64>,
    pub v: Array4<f64>,
}

/// Rewrites self-attention values for the whole batch before they are used.
pub trait AttentionHook: Send + Sync {
    fn transform_values(&self, layer: usize, values: Array4<f64>) -> Array4<f64>;
}

/// Leaves values untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn transform_values(&self, _layer: usize, values: Array4<f64>) -> Array4<f64> {
        values
    }
}
