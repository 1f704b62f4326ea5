//! Modified-CLM training with three learning rates.
//!
//! Base parameters (embeddings, stem, head 1, output embedding) train at
//! `lr_b` on the head-1 loss. Extra heads train at `lr_m` on their own
//! loss. Gradient that heads `n >= 2` send into base parameters is scaled
//! by `lr_mb / lr_b` before the optimizer sees it, so under plain SGD it
//! is applied at exactly `lr_mb`.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lm::{log_softmax, ModelError};
use crate::model::{MultiHeadModel, ParamGroup, Params};
use crate::vocab::TokenSequence;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize, report: Box<TrainingReport> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A mutable view of one parameter tensor with its learning-rate group.
pub struct ParamSlot<'a> {
    pub name: String,
    pub group: ParamGroup,
    /// Matrices get weight decay; vectors do not.
    pub decay: bool,
    pub data: &'a mut [f64],
}

/// Anything the trainer can update.
pub trait Trainable {
    fn n_heads(&self) -> usize;

    /// Per-head mean losses and gradients aligned with
    /// [`Trainable::param_slots`]. Cross-path gradient into base
    /// parameters is multiplied by `cross_scale`.
    fn loss_and_gradients(
        &self,
        batch: &[TokenSequence],
        cross_scale: f64,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError>;

    /// Per-head mean losses without gradients.
    fn losses(&self, batch: &[TokenSequence]) -> Result<Vec<f64>, ModelError>;

    fn param_slots(&mut self) -> Vec<ParamSlot<'_>>;
}

fn flatten(p: &Params) -> Vec<Vec<f64>> {
    p.collect().into_iter().map(|t| t.data.to_vec()).collect()
}

impl Trainable for MultiHeadModel {
    fn n_heads(&self) -> usize {
        self.config().n_heads
    }

    fn loss_and_gradients(
        &self,
        batch: &[TokenSequence],
        cross_scale: f64,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError> {
        let (l, g) = MultiHeadModel::loss_and_gradients(self, batch, cross_scale)?;
        Ok((l, flatten(&g)))
    }

    fn losses(&self, batch: &[TokenSequence]) -> Result<Vec<f64>, ModelError> {
        self.head_losses(batch)
    }

    fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        self.params_mut()
            .collect_mut()
            .into_iter()
            .map(|p| ParamSlot {
                group: Params::group_of(&p.name),
                decay: p.shape.len() == 2,
                name: p.name,
                data: p.data,
            })
            .collect()
    }
}

/// Multi-head linear model: `logits_i(t) = S[x_t] H_i`. `S` and `H_1`
/// form the base group, `H_i` for `i >= 2` the head groups.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub stem: Array2<f64>,
    pub heads: Vec<Array2<f64>>,
}

impl LinearProbe {
    pub fn new(vocab_size: usize, dim: usize, n_heads: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r, c| Array2::from_shape_simple_fn((r, c), || rng.random_range(-0.5..0.5));
        let stem = m(vocab_size, dim);
        let heads = (0..n_heads).map(|_| m(dim, vocab_size)).collect();
        Self { stem, heads }
    }

    fn run(&self, batch: &[TokenSequence], cross_scale: Option<f64>) -> (Vec<f64>, Vec<Array2<f64>>) {
        let n = self.heads.len();
        let seqs: Vec<_> = batch.iter().filter(|s| s.len() > n).collect();
        let counts: Vec<f64> = (0..n)
            .map(|i| seqs.iter().map(|s| (s.len() - 1 - i) as f64).sum())
            .collect();
        let mut losses = vec![0.0; n];
        let mut gs = Array2::zeros(self.stem.raw_dim());
        let mut gh: Vec<Array2<f64>> = self.heads.iter().map(|h| Array2::zeros(h.raw_dim())).collect();
        for s in seqs {
            for (i, h) in self.heads.iter().enumerate() {
                for p in 0..s.len() - 1 - i {
                    let x = self.stem.row(s[p] as usize);
                    let z = x.dot(h);
                    let lp = log_softmax(z.as_slice().expect("contiguous"));
                    let target = s[p + i + 1] as usize;
                    losses[i] -= lp[target] / counts[i];
                    if let Some(cross) = cross_scale {
                        let mut dz: Vec<f64> = lp.iter().map(|l| l.exp() / counts[i]).collect();
                        dz[target] -= 1.0 / counts[i];
                        let shared = if i == 0 { 1.0 } else { cross };
                        for (a, xa) in x.iter().enumerate() {
                            for (b, d) in dz.iter().enumerate() {
                                gh[i][[a, b]] += xa * d;
                            }
                            let back: f64 = dz.iter().zip(h.row(a)).map(|(d, w)| d * w).sum();
                            gs[[s[p] as usize, a]] += shared * back;
                        }
                    }
                }
            }
        }
        let mut grads = vec![gs];
        grads.extend(gh);
        (losses, grads)
    }
}

impl Trainable for LinearProbe {
    fn n_heads(&self) -> usize {
        self.heads.len()
    }

    fn loss_and_gradients(
        &self,
        batch: &[TokenSequence],
        cross_scale: f64,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), ModelError> {
        let (l, g) = self.run(batch, Some(cross_scale));
        Ok((l, g.into_iter().map(|a| a.into_raw_vec_and_offset().0).collect()))
    }

    fn losses(&self, batch: &[TokenSequence]) -> Result<Vec<f64>, ModelError> {
        Ok(self.run(batch, None).0)
    }

    fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut out = vec![ParamSlot {
            name: "stem".into(),
            group: ParamGroup::Base,
            decay: true,
            data: self.stem.as_slice_mut().expect("standard layout"),
        }];
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.push(ParamSlot {
                name: format!("head.{}", i + 1),
                group: if i == 0 { ParamGroup::Base } else { ParamGroup::Head(i + 1) },
                decay: true,
                data: h.as_slice_mut().expect("standard layout"),
            });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    AdamW { weight_decay: f64 },
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// Linear warmup over `warmup_fraction` of the steps, then cosine
    /// decay to zero.
    WarmupCosine { warmup_fraction: f64 },
    Constant,
}

impl Schedule {
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::WarmupCosine { warmup_fraction } => {
                let warm = ((warmup_fraction * total as f64).ceil() as usize).max(1);
                if step < warm {
                    (step + 1) as f64 / warm as f64
                } else {
                    let span = (total - warm).max(1) as f64;
                    0.5 * (1.0 + (PI * (step - warm) as f64 / span).cos())
                }
            }
        }
    }
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.95);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lr_b: f64,
    pub lr_m: f64,
    pub lr_mb: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    /// Global gradient-norm clip, or `None`.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Validation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr_b: 3e-3,
            lr_m: 1e-2,
            lr_mb: 3e-4,
            steps: 1000,
            batch_size: 16,
            optimizer: Optimizer::AdamW { weight_decay: 0.01 },
            schedule: Schedule::WarmupCosine { warmup_fraction: 0.01 },
            grad_clip: Some(1.0),
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainingConfig {
    /// Rates must satisfy `lr_mb < lr_b < lr_m`. A rate of exactly zero
    /// freezes its path and is exempt from the ordering.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [("lr_b", self.lr_b), ("lr_m", self.lr_m), ("lr_mb", self.lr_mb)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        if self.lr_b <= 0.0 {
            return bad("lr_b must be positive".into());
        }
        if self.lr_mb > 0.0 && self.lr_mb >= self.lr_b {
            return bad(format!("lr_mb {} must be below lr_b {}", self.lr_mb, self.lr_b));
        }
        if self.lr_m > 0.0 && self.lr_m <= self.lr_b {
            return bad(format!("lr_m {} must exceed lr_b {}", self.lr_m, self.lr_b));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Schedule::WarmupCosine { warmup_fraction } = self.schedule {
            if !(0.0..1.0).contains(&warmup_fraction) {
                return bad(format!("warmup fraction {warmup_fraction} outside [0, 1)"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }

    fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Base => self.lr_b,
            ParamGroup::Head(_) => self.lr_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationPoint {
    pub step: usize,
    /// Mean negative log-likelihood per head, i.e. `ln PPL_n`.
    pub log_ppl: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingReport {
    /// Per-step training losses `L_T1..L_Tn`.
    pub losses: Vec<Vec<f64>>,
    pub validation: Vec<ValidationPoint>,
    pub wall_clock: Duration,
}

impl TrainingReport {
    pub fn final_losses(&self) -> Option<&[f64]> {
        self.losses.last().map(Vec::as_slice)
    }
}

struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

fn apply_update<T: Trainable + ?Sized>(
    model: &mut T,
    grads: &[Vec<f64>],
    cfg: &TrainingConfig,
    factor: f64,
    state: &mut OptimizerState,
) {
    state.t += 1;
    let (b1, b2) = ADAM_BETAS;
    let c1 = 1.0 - b1.powi(state.t);
    let c2 = 1.0 - b2.powi(state.t);
    for (i, (slot, g)) in model.param_slots().into_iter().zip(grads).enumerate() {
        let lr = cfg.lr_for(slot.group) * factor;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, &gi) in slot.data.iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            Optimizer::AdamW { weight_decay } => {
                if state.m.len() <= i {
                    state.m.push(vec![0.0; g.len()]);
                    state.v.push(vec![0.0; g.len()]);
                }
                let wd = if slot.decay { weight_decay } else { 0.0 };
                let (m, v) = (&mut state.m[i], &mut state.v[i]);
                for (j, (p, &gi)) in slot.data.iter_mut().zip(g).enumerate() {
                    m[j] = b1 * m[j] + (1.0 - b1) * gi;
                    v[j] = b2 * v[j] + (1.0 - b2) * gi * gi;
                    let step = (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    *p -= lr * (step + wd * *p);
                }
            }
        }
    }
}

/// Trains `model` for `cfg.steps` steps on batches drawn uniformly with
/// replacement from `train_set`. Validation losses are recorded every
/// `eval_every` steps and at the end when `validation` is given.
pub fn train<T: Trainable + ?Sized>(
    model: &mut T,
    train_set: &[TokenSequence],
    validation: Option<&[TokenSequence]>,
    cfg: &TrainingConfig,
) -> Result<TrainingReport, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let start = Instant::now();
    let cross_scale = cfg.lr_mb / cfg.lr_b;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState {
        m: Vec::new(),
        v: Vec::new(),
        t: 0,
    };
    let mut report = TrainingReport::default();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        batch.extend((0..cfg.batch_size).map(|_| train_set[rng.random_range(0..train_set.len())].clone()));
        let (losses, mut grads) = model.loss_and_gradients(&batch, cross_scale)?;
        let finite = losses.iter().all(|l| l.is_finite()) && grads.iter().flatten().all(|g| g.is_finite());
        report.losses.push(losses);
        if !finite {
            report.wall_clock = start.elapsed();
            return Err(TrainError::Diverged {
                step,
                report: Box::new(report),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let factor = cfg.schedule.factor(step, cfg.steps);
        apply_update(model, &grads, cfg, factor, &mut state);
        let last = step + 1 == cfg.steps;
        if let Some(val) = validation {
            if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
                let log_ppl = model.losses(val)?;
                log::info!("step {}: validation ln PPL {:?}", step + 1, log_ppl);
                report.validation.push(ValidationPoint { step: step + 1, log_ppl });
            }
        }
        if step % 100 == 0 {
            log::debug!("step {step}: losses {:?}", report.losses.last());
        }
    }
    report.wall_clock = start.elapsed();
    Ok(report)
}
