use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::threshold::otsu_zero;
use super::{
    backoff_check, build_joint, gaussian_blur, penalize_repetition, sample_joint, static_threshold, topk_truncate,
    Backoff, DecodeError, DecoderConfig, HeadDistribution, JointDistribution,
};
use crate::lm::MultiHeadLm;
use crate::metrics::{GenerationTrace, StepRecord};
use crate::ngram::MaskSet;
use crate::vocab::TokenSequence;

/// Pipeline stages in the order a decoding step runs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Mask { order: usize },
    StaticThreshold { order: usize },
    Blur { order: usize },
    Otsu { order: usize },
    Penalty { order: usize },
    BackoffCheck { order: usize, backed_off: bool },
    Sample { order: usize },
}

/// Outcome of the back-off search for one step: the accepted order and
/// the processed joint to sample from.
#[derive(Debug, Clone)]
pub struct Decision {
    pub order: usize,
    pub backoffs: usize,
    pub joint: JointDistribution,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub emitted: TokenSequence,
    pub backoff_count: usize,
    pub max_joint_value: f64,
    pub joint_snapshot: Option<JointDistribution>,
}

/// A single generation stream. Owns its random generator; masks are
/// borrowed and may be shared between decoders.
pub struct Decoder<'m> {
    config: DecoderConfig,
    masks: &'m MaskSet,
    rng: ChaCha8Rng,
    stages: Option<Vec<Stage>>,
}

impl<'m> Decoder<'m> {
    pub fn new(config: DecoderConfig, masks: &'m MaskSet) -> Result<Self, DecodeError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        Ok(Self {
            config,
            masks,
            rng,
            stages: None,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Starts recording every pipeline stage executed from now on.
    pub fn record_stages(&mut self) {
        self.stages = Some(Vec::new());
    }

    pub fn stages(&self) -> &[Stage] {
        self.stages.as_deref().unwrap_or(&[])
    }

    fn log(&mut self, s: Stage) {
        if let Some(v) = self.stages.as_mut() {
            v.push(s);
        }
    }

    /// Tempered, truncated head distributions from raw logits, at most
    /// `max_order` of them.
    pub fn prepare_heads(&self, logits: &[Vec<f64>], max_order: usize) -> Result<Vec<HeadDistribution>, DecodeError> {
        let n = max_order.min(logits.len());
        if n == 0 {
            return Err(DecodeError::HeadMismatch("no head logits".into()));
        }
        logits[..n]
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let h = HeadDistribution::from_logits(i + 1, z, self.config.temperature)?;
                topk_truncate(&h, self.config.k)
            })
            .collect()
    }

    /// Runs masking, thresholding, repetition penalty and the back-off
    /// check from order `heads.len()` down, returning the first accepted
    /// order. Order 1 takes the penalized first-head candidates.
    pub fn decide(&mut self, heads: &[HeadDistribution], context: &[u32]) -> Result<Decision, DecodeError> {
        let cfg = self.config.clone();
        let mut n = heads.len();
        let mut backoffs = 0;
        while n > 1 {
            let mut joint = build_joint(&heads[..n], self.masks.get(n)?, cfg.alpha_c)?;
            self.log(Stage::Mask { order: n });
            static_threshold(&mut joint, cfg.epsilon_b);
            self.log(Stage::StaticThreshold { order: n });
            if cfg.adaptive_thresholding {
                if let Some(ks) = cfg.blur_kernel {
                    gaussian_blur(&mut joint, ks)?;
                    self.log(Stage::Blur { order: n });
                }
                otsu_zero(&mut joint);
                self.log(Stage::Otsu { order: n });
            }
            penalize_repetition(&mut joint, context, cfg.repetition_penalty, cfg.repetition_window);
            self.log(Stage::Penalty { order: n });
            let verdict = backoff_check(&joint, cfg.epsilon_b, n);
            self.log(Stage::BackoffCheck {
                order: n,
                backed_off: verdict == Backoff::BackOff,
            });
            if verdict == Backoff::Proceed {
                return Ok(Decision {
                    order: n,
                    backoffs,
                    joint,
                });
            }
            n -= 1;
            backoffs += 1;
        }
        let mut joint = JointDistribution::from_head(&heads[0]);
        penalize_repetition(&mut joint, context, cfg.repetition_penalty, cfg.repetition_window);
        self.log(Stage::Penalty { order: 1 });
        Ok(Decision {
            order: 1,
            backoffs,
            joint,
        })
    }

    /// One decoding step from one forward pass worth of head logits.
    pub fn step(
        &mut self,
        logits: &[Vec<f64>],
        context: &[u32],
        max_order: usize,
        keep_snapshot: bool,
    ) -> Result<StepResult, DecodeError> {
        let heads = self.prepare_heads(logits, max_order.min(self.config.n_max))?;
        let decision = self.decide(&heads, context)?;
        let tuple = sample_joint(&decision.joint, &mut self.rng)?;
        self.log(Stage::Sample { order: decision.order });
        Ok(StepResult {
            emitted: TokenSequence::new(tuple),
            backoff_count: decision.backoffs,
            max_joint_value: decision.joint.max_value(),
            joint_snapshot: keep_snapshot.then_some(decision.joint),
        })
    }

    /// Generates up to `max_tokens` tokens after `prompt`, one forward pass
    /// per step.
    pub fn generate<M: MultiHeadLm + ?Sized>(
        &mut self,
        model: &M,
        prompt: &[u32],
        max_tokens: usize,
    ) -> Result<(TokenSequence, GenerationTrace), DecodeError> {
        if prompt.is_empty() {
            return Err(DecodeError::EmptyPrompt);
        }
        if model.n_heads() < self.config.n_max {
            return Err(DecodeError::Config(format!(
                "n_max {} exceeds the model's {} heads",
                self.config.n_max,
                model.n_heads()
            )));
        }
        self.masks.check(self.config.n_max, model.vocab_size())?;

        let mut context = prompt.to_vec();
        let mut out = Vec::with_capacity(max_tokens);
        let mut trace = GenerationTrace::default();
        let limit = model.context_len();
        while out.len() < max_tokens {
            let start = context.len().saturating_sub(limit);
            let logits = model.next_logits(&context[start..])?;
            trace.forward_passes += 1;
            let budget = max_tokens - out.len();
            let step = self.step(&logits, &context, budget, false)?;
            let mut emitted = step.emitted.ids;
            let mut stop = false;
            if let Some(end) = self.config.end_token {
                if let Some(p) = emitted.iter().position(|&t| t == end) {
                    emitted.truncate(p + 1);
                    stop = true;
                }
            }
            trace.steps.push(StepRecord {
                emitted: emitted.len(),
                backoffs: step.backoff_count,
                max_joint_value: step.max_joint_value,
            });
            context.extend_from_slice(&emitted);
            out.extend_from_slice(&emitted);
            if stop {
                break;
            }
        }
        Ok((TokenSequence::new(out), trace))
    }
}

/// Convenience wrapper: a fresh decoder seeded from `config`.
pub fn generate<M: MultiHeadLm + ?Sized>(
    model: &M,
    prompt: &[u32],
    max_tokens: usize,
    config: &DecoderConfig,
    masks: &MaskSet,
) -> Result<(TokenSequence, GenerationTrace), DecodeError> {
    Decoder::new(config.clone(), masks)?.generate(model, prompt, max_tokens)
}
