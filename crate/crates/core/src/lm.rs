//! The interface the decoder and the metrics need from a multi-head model.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("context of {len} tokens exceeds the model limit of {limit}")]
    ContextTooLong { len: usize, limit: usize },
    #[error("empty context")]
    EmptyContext,
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("layer mismatch: {0}")]
    LayerMismatch(String),
    #[error("bad checkpoint at offset {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },
    #[error("{path}: {cause}")]
    File { path: String, cause: std::io::Error },
}

/// A language model with `n_heads` token heads. Head `i` (1-based) at
/// position `t` predicts the token at `t + i`.
pub trait MultiHeadLm {
    fn n_heads(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn context_len(&self) -> usize;

    /// Logits of every head at every position of `tokens`, one `T x V`
    /// matrix per head. A single call is one forward pass of the stem.
    fn sequence_logits(&self, tokens: &[u32]) -> Result<Vec<Array2<f64>>, ModelError>;

    /// Logits of every head at the last position of `context`.
    fn next_logits(&self, context: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        let all = self.sequence_logits(context)?;
        let last = context.len() - 1;
        Ok(all.iter().map(|m| m.row(last).to_vec()).collect())
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Softmax of `logits / temperature`.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    out
}

/// A model whose every head is uniform over the vocabulary.
#[derive(Debug, Clone)]
pub struct UniformLm {
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
}

impl MultiHeadLm for UniformLm {
    fn n_heads(&self) -> usize {
        self.n_heads
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn sequence_logits(&self, tokens: &[u32]) -> Result<Vec<Array2<f64>>, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        Ok((0..self.n_heads)
            .map(|_| Array2::zeros((tokens.len(), self.vocab_size)))
            .collect())
    }
}
