//! A small decoder-only transformer with a shared stem, several token
//! heads and one output embedding shared by every head.

mod checkpoint;
mod layer;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use layer::{DecoderLayer, LayerNorm, ParamMut, ParamRef};

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::decoder::HeadDistribution;
use crate::lm::{log_softmax, ModelError, MultiHeadLm};
use crate::vocab::TokenSequence;
use layer::{normal_matrix, LayerCache, LnCache};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub stem_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    /// Attention heads per layer; must divide `d_model`.
    pub attn_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 128,
            stem_layers: 2,
            n_heads: 3,
            context_len: 256,
            attn_heads: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.stem_layers < 1 || self.n_heads < 1 {
            return bad("stem_layers and n_heads must be at least 1".into());
        }
        if self.context_len < self.n_heads + 1 {
            return bad(format!(
                "context_len {} must be at least n_heads + 1 = {}",
                self.context_len,
                self.n_heads + 1
            ));
        }
        if self.d_model == 0 || self.attn_heads == 0 || !self.d_model.is_multiple_of(self.attn_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of attn_heads {}",
                self.d_model, self.attn_heads
            ));
        }
        Ok(())
    }
}

/// Which learning rate a parameter trains at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Embeddings, stem, head 1 and the output embedding.
    Base,
    /// Layer and final norm of head `i >= 2`.
    Head(usize),
}

/// One token head: a decoder layer on top of the stem and its own final
/// norm. Logits come from the shared output embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub layer: DecoderLayer,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub stem: Vec<DecoderLayer>,
    pub heads: Vec<Head>,
    pub out_emb: Array2<f64>,
}

impl Params {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let resid = INIT_STD / ((2 * (cfg.stem_layers + 1)) as f64).sqrt();
        Self {
            tok_emb: normal_matrix(cfg.vocab_size, d, INIT_STD, rng),
            pos_emb: normal_matrix(cfg.context_len, d, INIT_STD, rng),
            stem: (0..cfg.stem_layers)
                .map(|_| DecoderLayer::init(d, INIT_STD, resid, rng))
                .collect(),
            heads: (0..cfg.n_heads)
                .map(|_| Head {
                    layer: DecoderLayer::init(d, INIT_STD, resid, rng),
                    norm: LayerNorm::new(d),
                })
                .collect(),
            out_emb: normal_matrix(cfg.vocab_size, d, INIT_STD, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tok_emb: Array2::zeros(self.tok_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            stem: self.stem.iter().map(DecoderLayer::zeros_like).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| Head {
                    layer: h.layer.zeros_like(),
                    norm: LayerNorm::zeros(h.norm.gamma.len()),
                })
                .collect(),
            out_emb: Array2::zeros(self.out_emb.raw_dim()),
        }
    }

    /// Every tensor in a fixed order with dotted names.
    pub fn collect(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        out.push(ParamRef {
            name: "tok_emb".into(),
            shape: self.tok_emb.shape().to_vec(),
            data: self.tok_emb.as_slice().expect("standard layout"),
        });
        out.push(ParamRef {
            name: "pos_emb".into(),
            shape: self.pos_emb.shape().to_vec(),
            data: self.pos_emb.as_slice().expect("standard layout"),
        });
        for (i, l) in self.stem.iter().enumerate() {
            l.collect(&format!("stem.{i}"), &mut out);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.layer.collect(&format!("head.{}.layer", i + 1), &mut out);
            h.norm.collect(&format!("head.{}.norm", i + 1), &mut out);
        }
        out.push(ParamRef {
            name: "out_emb".into(),
            shape: self.out_emb.shape().to_vec(),
            data: self.out_emb.as_slice().expect("standard layout"),
        });
        out
    }

    /// Mutable counterpart of [`Params::collect`], same order.
    pub fn collect_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        let Params {
            tok_emb,
            pos_emb,
            stem,
            heads,
            out_emb,
        } = self;
        out.push(ParamMut {
            name: "tok_emb".into(),
            shape: tok_emb.shape().to_vec(),
            data: tok_emb.as_slice_mut().expect("standard layout"),
        });
        out.push(ParamMut {
            name: "pos_emb".into(),
            shape: pos_emb.shape().to_vec(),
            data: pos_emb.as_slice_mut().expect("standard layout"),
        });
        for (i, l) in stem.iter_mut().enumerate() {
            l.collect_mut(&format!("stem.{i}"), &mut out);
        }
        for (i, h) in heads.iter_mut().enumerate() {
            h.layer.collect_mut(&format!("head.{}.layer", i + 1), &mut out);
            h.norm.collect_mut(&format!("head.{}.norm", i + 1), &mut out);
        }
        out.push(ParamMut {
            name: "out_emb".into(),
            shape: out_emb.shape().to_vec(),
            data: out_emb.as_slice_mut().expect("standard layout"),
        });
        out
    }

    pub fn group_of(name: &str) -> ParamGroup {
        name.strip_prefix("head.")
            .and_then(|rest| rest.split('.').next())
            .and_then(|i| i.parse::<usize>().ok())
            .filter(|&i| i >= 2)
            .map_or(ParamGroup::Base, ParamGroup::Head)
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.collect_mut().into_iter().zip(other.collect()) {
            a.data.iter_mut().zip(b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn count(&self) -> usize {
        self.collect().iter().map(|p| p.data.len()).sum()
    }
}

struct SeqCache {
    stem: Vec<LayerCache>,
    heads: Vec<(LayerCache, LnCache, Array2<f64>)>,
}

/// Multi-head transformer. Every head reads the stem output; head 1 is the
/// base model's final layer.
#[derive(Debug)]
pub struct MultiHeadModel {
    config: ModelConfig,
    params: Params,
    stem_evals: AtomicUsize,
}

impl Clone for MultiHeadModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            stem_evals: AtomicUsize::new(0),
        }
    }
}

impl MultiHeadModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&config, &mut rng);
        Ok(Self {
            config,
            params,
            stem_evals: AtomicUsize::new(0),
        })
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = Params::init(&config, &mut rng);
        let want: Vec<_> = reference.collect().into_iter().map(|p| (p.name, p.shape)).collect();
        let got: Vec<_> = params.collect().into_iter().map(|p| (p.name, p.shape)).collect();
        if want != got {
            return Err(ModelError::LayerMismatch("parameter shapes do not match the configuration".into()));
        }
        Ok(Self {
            config,
            params,
            stem_evals: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Number of stem evaluations since construction or the last reset.
    pub fn stem_evaluations(&self) -> usize {
        self.stem_evals.load(Ordering::Relaxed)
    }

    pub fn reset_stem_evaluations(&self) {
        self.stem_evals.store(0, Ordering::Relaxed);
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        if tokens.len() > self.config.context_len {
            return Err(ModelError::ContextTooLong {
                len: tokens.len(),
                limit: self.config.context_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn forward_cached(&self, tokens: &[u32]) -> (Vec<Array2<f64>>, SeqCache) {
        self.stem_evals.fetch_add(1, Ordering::Relaxed);
        let t = tokens.len();
        let p = &self.params;
        let mut h = Array2::zeros((t, self.config.d_model));
        for (i, &tok) in tokens.iter().enumerate() {
            let row = &p.tok_emb.row(tok as usize) + &p.pos_emb.row(i);
            h.row_mut(i).assign(&row);
        }
        let mut stem = Vec::with_capacity(p.stem.len());
        for l in &p.stem {
            let (out, c) = l.forward(&h, self.config.attn_heads);
            h = out;
            stem.push(c);
        }
        let mut logits = Vec::with_capacity(p.heads.len());
        let mut heads = Vec::with_capacity(p.heads.len());
        for head in &p.heads {
            let (x, lc) = head.layer.forward(&h, self.config.attn_heads);
            let (y, nc) = head.norm.forward(&x);
            logits.push(y.dot(&p.out_emb.t()));
            heads.push((lc, nc, y));
        }
        (logits, SeqCache { stem, heads })
    }

    /// Head distributions at the last position of `context`, all computed
    /// from one stem evaluation.
    pub fn forward(&self, context: &[u32]) -> Result<Vec<HeadDistribution>, ModelError> {
        self.next_logits(context)?
            .iter()
            .enumerate()
            .map(|(i, z)| HeadDistribution::from_logits(i + 1, z, 1.0).map_err(|e| ModelError::Config(e.to_string())))
            .collect()
    }

    fn usable<'a>(&self, batch: &'a [TokenSequence]) -> Vec<&'a TokenSequence> {
        let n = self.config.n_heads;
        let (ok, short): (Vec<_>, Vec<_>) = batch.iter().partition(|s| s.len() > n);
        if !short.is_empty() {
            log::warn!("skipping {} sequences shorter than {} tokens", short.len(), n + 1);
        }
        ok
    }

    fn check_batch(&self, seqs: &[&TokenSequence]) -> Result<(), ModelError> {
        seqs.iter().try_for_each(|s| self.check_tokens(&s[..s.len() - 1]))?;
        seqs.iter()
            .flat_map(|s| s.iter())
            .find(|&&t| t as usize >= self.config.vocab_size)
            .map_or(Ok(()), |&id| {
                Err(ModelError::TokenOutOfRange {
                    id,
                    vocab_size: self.config.vocab_size,
                })
            })
    }

    /// Per-head training losses: `L_Tn` is the mean negative
    /// log-probability of `x[t+n]` over all predicted positions of the
    /// batch. Sequences of `n_heads` tokens or fewer are skipped.
    pub fn head_losses(&self, batch: &[TokenSequence]) -> Result<Vec<f64>, ModelError> {
        let seqs = self.usable(batch);
        self.check_batch(&seqs)?;
        let n = self.config.n_heads;
        let parts: Vec<Vec<f64>> = seqs
            .par_iter()
            .map(|s| {
                let (logits, _) = self.forward_cached(&s[..s.len() - 1]);
                (0..n)
                    .map(|i| {
                        let mut sum = 0.0;
                        for p in 0..s.len() - 1 - i {
                            sum -= log_softmax(logits[i].row(p).as_slice().expect("standard layout"))
                                [s[p + i + 1] as usize];
                        }
                        sum
                    })
                    .collect()
            })
            .collect();
        Ok(reduce_losses(&parts, &seqs, n))
    }

    /// Total modified-CLM loss and its per-head terms.
    pub fn loss_modified_clm(&self, batch: &[TokenSequence]) -> Result<(f64, Vec<f64>), ModelError> {
        let per_head = self.head_losses(batch)?;
        Ok((per_head.iter().sum(), per_head))
    }

    /// Per-head losses and the gradient of `L_T1 + cross_scale * sum(L_Tn)`
    /// with respect to shared parameters, where heads `n >= 2` contribute
    /// their unscaled gradient to their own layer and norm.
    pub fn loss_and_gradients(
        &self,
        batch: &[TokenSequence],
        cross_scale: f64,
    ) -> Result<(Vec<f64>, Params), ModelError> {
        let seqs = self.usable(batch);
        self.check_batch(&seqs)?;
        let n = self.config.n_heads;
        let counts: Vec<f64> = (0..n)
            .map(|i| seqs.iter().map(|s| (s.len() - 1 - i) as f64).sum())
            .collect();
        let parts: Vec<(Vec<f64>, Params)> = seqs
            .par_iter()
            .map(|s| self.sequence_backward(s, &counts, cross_scale))
            .collect();
        let mut grads = self.params.zeros_like();
        let mut sums = Vec::with_capacity(parts.len());
        for (l, g) in parts {
            grads.add_assign(&g);
            sums.push(l);
        }
        Ok((reduce_losses(&sums, &seqs, n), grads))
    }

    fn sequence_backward(&self, seq: &[u32], counts: &[f64], cross_scale: f64) -> (Vec<f64>, Params) {
        let input = &seq[..seq.len() - 1];
        let t = input.len();
        let (logits, cache) = self.forward_cached(input);
        let p = &self.params;
        let mut g = p.zeros_like();
        let mut losses = Vec::with_capacity(logits.len());
        let mut d_stem = Array2::<f64>::zeros((t, self.config.d_model));
        for (i, (z, (lc, nc, y))) in logits.iter().zip(&cache.heads).enumerate() {
            let mut dz = Array2::<f64>::zeros(z.raw_dim());
            let mut loss = 0.0;
            for pos in 0..seq.len() - 1 - i {
                let target = seq[pos + i + 1] as usize;
                let lp = log_softmax(z.row(pos).as_slice().expect("standard layout"));
                loss -= lp[target];
                let mut row = dz.row_mut(pos);
                for (d, l) in row.iter_mut().zip(&lp) {
                    *d = l.exp() / counts[i];
                }
                row[target] -= 1.0 / counts[i];
            }
            losses.push(loss);
            let shared = if i == 0 { 1.0 } else { cross_scale };
            g.out_emb.scaled_add(shared, &dz.t().dot(y));
            let dy = dz.dot(&p.out_emb);
            let head = &p.heads[i];
            let dx = head.norm.backward(&dy, nc, &mut g.heads[i].norm);
            let dh = head.layer.backward(&dx, lc, self.config.attn_heads, &mut g.heads[i].layer);
            d_stem.scaled_add(shared, &dh);
        }
        for (l, (layer, c)) in p.stem.iter().zip(&cache.stem).enumerate().rev() {
            d_stem = layer.backward(&d_stem, c, self.config.attn_heads, &mut g.stem[l]);
        }
        for (pos, &tok) in input.iter().enumerate() {
            let row = d_stem.row(pos);
            let mut te = g.tok_emb.row_mut(tok as usize);
            te += &row;
            let mut pe = g.pos_emb.row_mut(pos);
            pe += &row;
        }
        (losses, g)
    }

    /// Builds an `n_heads` model from a single-head base with
    /// `stem_layers + 1` layers: the stem is the base's first `stem_layers`
    /// layers, head 1 its last layer and final norm, and the output
    /// embedding is the base's. New heads get fresh layers and a zero final
    /// norm (uniform output), or copies of head 1 with `copy_init`.
    pub fn transfer_from_base(
        base: &MultiHeadModel,
        stem_layers: usize,
        n_heads: usize,
        copy_init: bool,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let bc = base.config();
        if bc.n_heads != 1 {
            return Err(ModelError::LayerMismatch(format!(
                "base model must have one head, found {}",
                bc.n_heads
            )));
        }
        if bc.stem_layers != stem_layers {
            return Err(ModelError::LayerMismatch(format!(
                "base has {} layers, transfer to a {}-layer stem needs {}",
                bc.stem_layers + 1,
                stem_layers,
                stem_layers + 1
            )));
        }
        let config = ModelConfig {
            n_heads,
            ..bc.clone()
        };
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let resid = INIT_STD / ((2 * (stem_layers + 1)) as f64).sqrt();
        let mut heads = vec![base.params.heads[0].clone()];
        for _ in 1..n_heads {
            heads.push(if copy_init {
                base.params.heads[0].clone()
            } else {
                Head {
                    layer: DecoderLayer::init(d, INIT_STD, resid, &mut rng),
                    norm: LayerNorm::zeros(d),
                }
            });
        }
        let params = Params {
            tok_emb: base.params.tok_emb.clone(),
            pos_emb: base.params.pos_emb.clone(),
            stem: base.params.stem.clone(),
            heads,
            out_emb: base.params.out_emb.clone(),
        };
        Self::from_params(config, params)
    }
}

fn reduce_losses(parts: &[Vec<f64>], seqs: &[&TokenSequence], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let count: usize = seqs.iter().map(|s| s.len() - 1 - i).sum();
            if count == 0 {
                return f64::NAN;
            }
            parts.iter().map(|p| p[i]).sum::<f64>() / count as f64
        })
        .collect()
}

impl MultiHeadLm for MultiHeadModel {
    fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn sequence_logits(&self, tokens: &[u32]) -> Result<Vec<Array2<f64>>, ModelError> {
        self.check_tokens(tokens)?;
        Ok(self.forward_cached(tokens).0)
    }

    fn next_logits(&self, context: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        let all = self.sequence_logits(context)?;
        let last = context.len() - 1;
        Ok(all.iter().map(|m| m.slice(s![last, ..]).to_vec()).collect())
    }
}
