//! Multi-token perplexities, dynamic perplexity, speed-up and
//! generation-mix statistics.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::decoder::{DecodeError, Decoder, DecoderConfig};
use crate::lm::{log_softmax, ModelError, MultiHeadLm};
use crate::ngram::MaskSet;
use crate::vocab::TokenSequence;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("validation set has no sequence long enough for order {0}")]
    EmptyValidation(usize),
    #[error("order {order} outside 1..={max}")]
    BadOrder { order: usize, max: usize },
    #[error("trace has no steps")]
    NoSteps,
    #[error("bad epsilon grid {0:?}")]
    Grid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One decoding step as seen by the statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Tokens emitted by the step.
    pub emitted: usize,
    pub backoffs: usize,
    /// Largest joint cell after thresholding and penalty.
    pub max_joint_value: f64,
}

/// Per-step record of a generation or a teacher-forced walk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationTrace {
    pub steps: Vec<StepRecord>,
    pub forward_passes: usize,
}

impl GenerationTrace {
    pub fn from_counts(counts: &[usize]) -> Self {
        Self {
            steps: counts
                .iter()
                .map(|&m| StepRecord {
                    emitted: m,
                    backoffs: 0,
                    max_joint_value: 0.0,
                })
                .collect(),
            forward_passes: counts.len(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.steps.iter().map(|s| s.emitted).sum()
    }

    pub fn extend(&mut self, other: GenerationTrace) {
        self.steps.extend(other.steps);
        self.forward_passes += other.forward_passes;
    }
}

/// Tokens per forward pass, and the fraction of steps emitting
/// `1..=n_max` tokens.
pub fn speedup_and_mix(trace: &GenerationTrace, n_max: usize) -> Result<(f64, Vec<f64>), MetricsError> {
    if trace.steps.is_empty() {
        return Err(MetricsError::NoSteps);
    }
    let steps = trace.steps.len() as f64;
    let mut counts = vec![0usize; n_max];
    for s in &trace.steps {
        if s.emitted == 0 || s.emitted > n_max {
            return Err(MetricsError::BadOrder {
                order: s.emitted,
                max: n_max,
            });
        }
        counts[s.emitted - 1] += 1;
    }
    let speedup = trace.tokens() as f64 / steps;
    Ok((speedup, counts.into_iter().map(|c| c as f64 / steps).collect()))
}

/// Log-probabilities of every head at every predicting position of `seq`.
/// Position `p` predicts `seq[p + i]` with head `i`.
fn head_log_probs<M: MultiHeadLm + ?Sized>(model: &M, seq: &[u32]) -> Result<Vec<Array2<f64>>, ModelError> {
    let logits = model.sequence_logits(&seq[..seq.len() - 1])?;
    Ok(logits
        .into_iter()
        .map(|mut m| {
            for mut row in m.rows_mut() {
                let lp = log_softmax(row.as_slice().expect("standard layout"));
                row.iter_mut().zip(lp).for_each(|(z, l)| *z = l);
            }
            m
        })
        .collect())
}

fn check_order<M: MultiHeadLm + ?Sized>(model: &M, n: usize) -> Result<(), MetricsError> {
    if n == 0 || n > model.n_heads() {
        return Err(MetricsError::BadOrder {
            order: n,
            max: model.n_heads(),
        });
    }
    Ok(())
}

/// Sum of log-probabilities and number of terms per sequence, reduced in
/// sequence order.
fn reduce(parts: Vec<(f64, usize)>, n: usize) -> Result<f64, MetricsError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (s, c) in parts {
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(MetricsError::EmptyValidation(n));
    }
    Ok((-sum / count as f64).exp())
}

/// Perplexity of head `n`: `exp` of the mean negative log-probability of
/// `x[t+n]` over every position with a target. Sequences of `n` tokens or
/// fewer contribute nothing.
pub fn ppl_n<M: MultiHeadLm + Sync + ?Sized>(
    model: &M,
    validation: &[TokenSequence],
    n: usize,
) -> Result<f64, MetricsError> {
    check_order(model, n)?;
    let parts = validation
        .par_iter()
        .filter(|s| s.len() > n)
        .map(|s| {
            let lp = head_log_probs(model, s)?;
            let h = &lp[n - 1];
            let mut sum = 0.0;
            for p in 0..s.len() - n {
                sum += h[[p, s[p + n] as usize]];
            }
            Ok((sum, s.len() - n))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    reduce(parts, n)
}

/// Joint perplexity over offsets `1..=n` under the independent product of
/// the heads, normalized per predicted token.
pub fn ppl_joint<M: MultiHeadLm + Sync + ?Sized>(
    model: &M,
    validation: &[TokenSequence],
    n: usize,
) -> Result<f64, MetricsError> {
    check_order(model, n)?;
    let parts = validation
        .par_iter()
        .filter(|s| s.len() > n)
        .map(|s| {
            let lp = head_log_probs(model, s)?;
            let mut sum = 0.0;
            for p in 0..s.len() - n {
                for (i, h) in lp[..n].iter().enumerate() {
                    sum += h[[p, s[p + i + 1] as usize]];
                }
            }
            Ok((sum, n * (s.len() - n)))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    reduce(parts, n)
}

/// Result of a teacher-forced dynamic walk.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicEval {
    pub ppl: f64,
    pub trace: GenerationTrace,
}

/// Teacher-forced walk over one sequence: at each position the decoding
/// pipeline picks an order `m` from the predicted heads, the reference
/// tokens' log-probabilities under heads `1..=m` are accumulated, and the
/// walk advances by `m`.
fn walk_sequence<M: MultiHeadLm + ?Sized>(
    model: &M,
    seq: &[u32],
    config: &DecoderConfig,
    masks: &MaskSet,
) -> Result<(f64, usize, GenerationTrace), MetricsError> {
    let lp = head_log_probs(model, seq)?;
    let logits = model.sequence_logits(&seq[..seq.len() - 1])?;
    let mut decoder = Decoder::new(config.clone(), masks)?;
    let mut trace = GenerationTrace::default();
    let mut sum = 0.0;
    let mut p = 0;
    let last = seq.len() - 1;
    while p < last {
        let budget = config.n_max.min(last - p);
        let (m, backoffs, max_joint_value) = if budget == 1 {
            (1, 0, 0.0)
        } else {
            let rows: Vec<Vec<f64>> = logits[..budget].iter().map(|h| h.row(p).to_vec()).collect();
            let heads = decoder.prepare_heads(&rows, budget)?;
            let d = decoder.decide(&heads, &seq[..=p])?;
            (d.order, d.backoffs, d.joint.max_value())
        };
        for (i, h) in lp[..m].iter().enumerate() {
            sum += h[[p, seq[p + i + 1] as usize]];
        }
        trace.steps.push(StepRecord {
            emitted: m,
            backoffs,
            max_joint_value,
        });
        trace.forward_passes += 1;
        p += m;
    }
    Ok((sum, last, trace))
}

/// Dynamic perplexity: the teacher-forced walk's accumulated negative
/// log-probability normalized by tokens consumed. At `epsilon_b = 1` every
/// step emits one token and the value reduces to PPL_1 bit for bit.
pub fn ppl_dynamic<M: MultiHeadLm + Sync + ?Sized>(
    model: &M,
    validation: &[TokenSequence],
    config: &DecoderConfig,
    masks: &MaskSet,
) -> Result<DynamicEval, MetricsError> {
    config.validate()?;
    check_order(model, config.n_max)?;
    masks.check(config.n_max, model.vocab_size()).map_err(DecodeError::from)?;
    let parts = validation
        .par_iter()
        .filter(|s| s.len() > 1)
        .map(|s| walk_sequence(model, s, config, masks))
        .collect::<Result<Vec<_>, _>>()?;
    let mut trace = GenerationTrace::default();
    let mut sums = Vec::with_capacity(parts.len());
    for (s, c, t) in parts {
        sums.push((s, c));
        trace.extend(t);
    }
    let ppl = reduce(sums, 1)?;
    Ok(DynamicEval { ppl, trace })
}

/// Full evaluation at one decoder configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `ppl_n[i]` is PPL_{i+1}.
    pub ppl_n: Vec<f64>,
    /// `ppl_joint[i]` is PPL_{1:i+2}.
    pub ppl_joint: Vec<f64>,
    pub ppl_d: f64,
    pub speedup: f64,
    /// `mix[i]` is the fraction of steps emitting `i + 1` tokens.
    pub mix: Vec<f64>,
}

impl MetricsReport {
    pub fn evaluate<M: MultiHeadLm + Sync + ?Sized>(
        model: &M,
        validation: &[TokenSequence],
        config: &DecoderConfig,
        masks: &MaskSet,
    ) -> Result<Self, MetricsError> {
        let n_max = config.n_max;
        let ppl_n = (1..=n_max)
            .map(|n| ppl_n(model, validation, n))
            .collect::<Result<Vec<_>, _>>()?;
        let ppl_joint = (2..=n_max)
            .map(|n| ppl_joint(model, validation, n))
            .collect::<Result<Vec<_>, _>>()?;
        let dynamic = ppl_dynamic(model, validation, config, masks)?;
        let (speedup, mix) = speedup_and_mix(&dynamic.trace, n_max)?;
        Ok(Self {
            ppl_n,
            ppl_joint,
            ppl_d: dynamic.ppl,
            speedup,
            mix,
        })
    }
}

/// Parses `start:stop:step` (inclusive of `stop`) or a comma-separated
/// list. Values are rounded to 1e-10 and must lie in `[0, 1]`.
pub fn parse_epsilon_grid(spec: &str) -> Result<Vec<f64>, MetricsError> {
    let bad = || MetricsError::Grid(spec.to_string());
    let round = |x: f64| (x * 1e10).round() / 1e10;
    let values: Vec<f64> = if spec.contains(':') {
        let parts: Vec<f64> = spec
            .split(':')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let [start, stop, step] = parts[..] else {
            return Err(bad());
        };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| round(start + i as f64 * step)).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>().map(round).map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if values.is_empty() || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(bad());
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub epsilon_b: f64,
    pub ppl_d: f64,
    pub speedup: f64,
    pub mix: Vec<f64>,
}

/// Dynamic perplexity, speed-up and mix at every `epsilon_b` in `grid`.
pub fn sweep<M: MultiHeadLm + Sync + ?Sized>(
    model: &M,
    validation: &[TokenSequence],
    base: &DecoderConfig,
    masks: &MaskSet,
    grid: &[f64],
) -> Result<Vec<SweepRow>, MetricsError> {
    grid.iter()
        .map(|&eps| {
            let cfg = DecoderConfig {
                epsilon_b: eps,
                ..base.clone()
            };
            let d = ppl_dynamic(model, validation, &cfg, masks)?;
            let (speedup, mix) = speedup_and_mix(&d.trace, cfg.n_max)?;
            log::info!("epsilon_b {eps}: ppl_d {:.4} speedup {:.4}", d.ppl, speedup);
            Ok(SweepRow {
                epsilon_b: eps,
                ppl_d: d.ppl,
                speedup,
                mix,
            })
        })
        .collect()
}

/// CSV with columns `epsilon_b,ppl_d,speedup,mix1..mixN`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<(), MetricsError> {
    let n = rows.first().map_or(0, |r| r.mix.len());
    write!(out, "epsilon_b,ppl_d,speedup")?;
    for i in 1..=n {
        write!(out, ",mix{i}")?;
    }
    writeln!(out)?;
    for r in rows {
        write!(out, "{},{},{}", r.epsilon_b, r.ppl_d, r.speedup)?;
        for m in &r.mix {
            write!(out, ",{m}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::UniformLm;

    #[test]
    fn mix_examples() {
        let (s, m) = speedup_and_mix(&GenerationTrace::from_counts(&[3; 10]), 3).unwrap();
        assert_eq!(s, 3.0);
        assert_eq!(m, vec![0.0, 0.0, 1.0]);
        let (s, _) = speedup_and_mix(&GenerationTrace::from_counts(&[1; 7]), 3).unwrap();
        assert_eq!(s, 1.0);
        let (s, m) = speedup_and_mix(&GenerationTrace::from_counts(&[1, 3, 2, 3]), 3).unwrap();
        assert_eq!(s, 2.25);
        assert_eq!(m, vec![0.25, 0.25, 0.5]);
        assert!(matches!(
            speedup_and_mix(&GenerationTrace::default(), 3),
            Err(MetricsError::NoSteps)
        ));
    }

    #[test]
    fn uniform_perplexities() {
        let lm = UniformLm {
            n_heads: 3,
            vocab_size: 7,
            context_len: 32,
        };
        let val: Vec<TokenSequence> = vec![vec![1, 2, 3, 4, 5, 6].into(), vec![0, 0, 1].into()];
        for n in 1..=3 {
            assert!((ppl_n(&lm, &val, n).unwrap() - 7.0).abs() < 1e-9);
            assert!((ppl_joint(&lm, &val, n).unwrap() - 7.0).abs() < 1e-9);
        }
        assert!(matches!(ppl_n(&lm, &val, 4), Err(MetricsError::BadOrder { .. })));
        let short: Vec<TokenSequence> = vec![vec![1].into()];
        assert!(matches!(ppl_n(&lm, &short, 1), Err(MetricsError::EmptyValidation(1))));
    }

    #[test]
    fn grid_parsing() {
        let g = parse_epsilon_grid("0:1:0.5").unwrap();
        assert_eq!(g, vec![0.0, 0.5, 1.0]);
        let g = parse_epsilon_grid("0:1:0.02").unwrap();
        assert_eq!(g.len(), 51);
        assert_eq!(g[3], 0.06);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert_eq!(parse_epsilon_grid("0.2, 0.7").unwrap(), vec![0.2, 0.7]);
        assert!(parse_epsilon_grid("0:2:0.5").is_err());
        assert!(parse_epsilon_grid("0:1").is_err());
        assert!(parse_epsilon_grid("1:0:0.1").is_err());
    }

    #[test]
    fn csv_layout() {
        let rows = vec![SweepRow {
            epsilon_b: 0.5,
            ppl_d: 2.0,
            speedup: 1.5,
            mix: vec![0.5, 0.5, 0.0],
        }];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epsilon_b,ppl_d,speedup,mix1,mix2,mix3\n0.5,2,1.5,0.5,0.5,0\n"
        );
    }
}
