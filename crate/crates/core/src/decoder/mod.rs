//! Dynamic multi-token decoding.
//!
//! One forward pass yields a distribution per token head. The heads are
//! truncated to their top-k candidates, combined into a co-occurrence
//! masked joint over candidate tuples, thresholded, penalized for
//! repetition, and either sampled or backed off to a lower order.

mod generate;
mod head;
mod joint;
mod select;
mod threshold;

pub use generate::{generate, Decision, Decoder, Stage, StepResult};
pub use head::{topk_truncate, HeadDistribution};
pub use joint::{build_joint, JointDistribution};
pub use select::{backoff_check, penalize_repetition, sample_joint, Backoff};
pub use threshold::{
    adaptive_threshold, bin_of, gaussian_blur, gaussian_kernel, otsu_bin, otsu_histogram, otsu_threshold,
    static_threshold, OTSU_BINS,
};

use thiserror::Error;

use crate::lm::ModelError;
use crate::ngram::MaskError;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("k must be positive")]
    BadK,
    #[error("invalid decoder configuration: {0}")]
    Config(String),
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("probability vector has a negative or non-finite entry at {0}")]
    BadProbability(usize),
    #[error("mask order {found} does not match joint order {expected}")]
    MaskOrder { expected: usize, found: usize },
    #[error("heads disagree: {0}")]
    HeadMismatch(String),
    #[error("blur kernel size {0} must be odd and at least 3")]
    BadKernel(usize),
    #[error("joint distribution has no positive cell")]
    AllZero,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Decoding hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Highest joint order attempted per step.
    pub n_max: usize,
    pub k: usize,
    pub temperature: f64,
    pub repetition_penalty: f64,
    /// Number of trailing context tokens checked for repetitions.
    pub repetition_window: usize,
    pub epsilon_b: f64,
    pub alpha_c: f64,
    pub adaptive_thresholding: bool,
    /// Odd Gaussian kernel size applied before Otsu, or `None`.
    pub blur_kernel: Option<usize>,
    pub rng_seed: u64,
    /// Generation stops after emitting this token.
    pub end_token: Option<u32>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_max: 3,
            k: 50,
            temperature: 0.7,
            repetition_penalty: 1.1,
            repetition_window: 64,
            epsilon_b: 0.5,
            alpha_c: 1.0,
            adaptive_thresholding: true,
            blur_kernel: Some(3),
            rng_seed: 0,
            end_token: None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::Config(m));
        if !(2..=crate::ngram::MAX_ORDER).contains(&self.n_max) {
            return bad(format!("n_max {} outside 2..=4", self.n_max));
        }
        if self.k == 0 {
            return Err(DecodeError::BadK);
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.repetition_penalty.is_finite() && self.repetition_penalty >= 1.0) {
            return bad(format!("repetition penalty {} must be >= 1", self.repetition_penalty));
        }
        if !(0.0..=1.0).contains(&self.epsilon_b) {
            return bad(format!("epsilon_b {} outside [0, 1]", self.epsilon_b));
        }
        if !(0.0..=1.0).contains(&self.alpha_c) {
            return bad(format!("alpha_c {} outside [0, 1]", self.alpha_c));
        }
        if let Some(ks) = self.blur_kernel {
            if ks < 3 || ks % 2 == 0 {
                return Err(DecodeError::BadKernel(ks));
            }
        }
        Ok(())
    }
}
