use super::DecodeError;
use crate::lm::softmax_with_temperature;

/// The distribution predicted by one token head, optionally truncated to
/// its top-k candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDistribution {
    head_index: usize,
    probs: Vec<f64>,
    topk_ids: Vec<u32>,
    topk_probs: Vec<f64>,
}

impl HeadDistribution {
    /// Wraps a normalized probability vector. The candidate set starts as
    /// the full vocabulary in id order.
    pub fn from_probs(head_index: usize, probs: Vec<f64>) -> Result<Self, DecodeError> {
        if let Some(i) = probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(DecodeError::BadProbability(i));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(DecodeError::NotNormalized(sum));
        }
        let topk_ids = (0..probs.len() as u32).collect();
        let topk_probs = probs.clone();
        Ok(Self {
            head_index,
            probs,
            topk_ids,
            topk_probs,
        })
    }

    /// Softmax of `logits / temperature`.
    pub fn from_logits(head_index: usize, logits: &[f64], temperature: f64) -> Result<Self, DecodeError> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(DecodeError::Config(format!("temperature {temperature} must be positive")));
        }
        Self::from_probs(head_index, softmax_with_temperature(logits, temperature))
    }

    /// 1-based head index.
    pub fn head_index(&self) -> usize {
        self.head_index
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn topk_ids(&self) -> &[u32] {
        &self.topk_ids
    }

    pub fn topk_probs(&self) -> &[f64] {
        &self.topk_probs
    }

    pub fn k(&self) -> usize {
        self.topk_ids.len()
    }
}

/// Keeps the `k` most probable tokens, ties broken toward the lower id.
/// `k` larger than the vocabulary keeps everything. Probabilities are not
/// renormalized.
pub fn topk_truncate(head: &HeadDistribution, k: usize) -> Result<HeadDistribution, DecodeError> {
    if k == 0 {
        return Err(DecodeError::BadK);
    }
    let mut order: Vec<u32> = (0..head.probs.len() as u32).collect();
    order.sort_by(|&a, &b| {
        head.probs[b as usize]
            .total_cmp(&head.probs[a as usize])
            .then(a.cmp(&b))
    });
    order.truncate(k);
    let topk_probs = order.iter().map(|&i| head.probs[i as usize]).collect();
    Ok(HeadDistribution {
        head_index: head.head_index,
        probs: head.probs.clone(),
        topk_ids: order,
        topk_probs,
    })
}
