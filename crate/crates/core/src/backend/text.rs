use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, Key};
use crate::types::PromptEmbedding;

pub const DEFAULT_TEXT_DIM: usize = 32;

/// Deterministic stand-in for a text encoder.
///
/// Whitespace-separated words are hashed to 64 bits; each word's row is a
/// Gaussian vector drawn from a stream keyed by `(seed, word hash)`, so the
/// row depends on the word alone and not on its position.
pub fn embed_text(prompt: &str, seed: u64) -> Result<PromptEmbedding> {
    embed_text_with_dim(prompt, seed, DEFAULT_TEXT_DIM)
}

pub fn embed_text_with_dim(prompt: &str, seed: u64, dim: usize) -> Result<PromptEmbedding> {
    if prompt.trim().is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    if dim == 0 {
        return Err(Error::Config("text dimension must be at least 1".into()));
    }
    let tokens_hashed: Vec<u64> = prompt
        .split_whitespace()
        .map(|w| fnv1a64(w.as_bytes()))
        .collect();
    let root = Key::root(seed).named("text");
    let mut embedding = Array2::zeros((tokens_hashed.len(), dim));
    for (mut row, &hash) in embedding.rows_mut().into_iter().zip(&tokens_hashed) {
        let mut stream = root.derive(hash).stream();
        row.iter_mut()
            .for_each(|v| *v = StandardNormal.sample(&mut stream));
    }
    Ok(PromptEmbedding {
        tokens_hashed,
        embedding,
    })
}
