#![allow(dead_code)]

use multitok_core::model::{ModelConfig, MultiHeadModel};
use multitok_core::train::{train, TrainingConfig};
use multitok_core::vocab::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Order-2 Markov chain over `v` tokens: row `a * v + b` is the law of the
/// next token after `a, b`. Each row puts most of its mass on two tokens.
pub fn markov_chain(v: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..v * v)
        .map(|_| {
            let mut row: Vec<f64> = (0..v).map(|_| rng.random_range(0.0..1.0) * 0.1 / v as f64).collect();
            let a = rng.random_range(0..v);
            let b = (a + 1 + rng.random_range(0..v - 1)) % v;
            row[a] += 0.65;
            row[b] += 0.25;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            row
        })
        .collect()
}

pub fn sample_chain(chain: &[Vec<f64>], v: usize, n_seqs: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_seqs)
        .map(|_| {
            let mut s = vec![rng.random_range(0..v as u32), rng.random_range(0..v as u32)];
            while s.len() < len {
                let row = &chain[s[s.len() - 2] as usize * v + s[s.len() - 1] as usize];
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut next = v - 1;
                for (i, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        next = i;
                        break;
                    }
                }
                s.push(next as u32);
            }
            TokenSequence::new(s)
        })
        .collect()
}

/// Perplexity of the stationary unigram law of the chain.
pub fn unigram_entropy_ppl(chain: &[Vec<f64>], v: usize) -> f64 {
    let mut pair = vec![1.0 / (v * v) as f64; v * v];
    for _ in 0..2000 {
        let mut next = vec![0.0; v * v];
        for a in 0..v {
            for b in 0..v {
                for c in 0..v {
                    next[b * v + c] += pair[a * v + b] * chain[a * v + b][c];
                }
            }
        }
        pair = next;
    }
    let uni: Vec<f64> = (0..v).map(|b| (0..v).map(|c| pair[b * v + c]).sum()).collect();
    let h: f64 = uni.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
    h.exp()
}

pub fn toy_config(v: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        d_model: 32,
        stem_layers: 1,
        n_heads,
        context_len: 32,
        attn_heads: 2,
    }
}

pub fn train_toy(v: usize, n_heads: usize, data: &[TokenSequence], steps: usize, seed: u64) -> MultiHeadModel {
    let mut m = MultiHeadModel::new(toy_config(v, n_heads), seed).unwrap();
    let cfg = TrainingConfig {
        steps,
        seed,
        ..TrainingConfig::default()
    };
    train(&mut m, data, None, &cfg).unwrap();
    m
}

/// Exhaustive Otsu search in exact rationals straight from the definition
/// `w0 (mu0 - mu)^2 + w1 (mu1 - mu)^2`, lowest bin on ties.
pub fn otsu_oracle(hist: &[u64]) -> Option<usize> {
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::Zero;

    let q = |x: u64| BigRational::from_integer(BigInt::from(x));
    let n: u64 = hist.iter().sum();
    if n == 0 {
        return None;
    }
    let mean = |lo: usize, hi: usize| -> (BigRational, BigRational) {
        let w: u64 = hist[lo..hi].iter().sum();
        let s: u64 = (lo..hi).map(|b| b as u64 * hist[b]).sum();
        (q(w) / q(n), q(s) / q(w))
    };
    let total_mean = mean(0, hist.len()).1;
    let mut best: Option<(usize, BigRational)> = None;
    for t in 0..hist.len() - 1 {
        let w0: u64 = hist[..=t].iter().sum();
        if w0 == 0 || w0 == n {
            continue;
        }
        let (p0, m0) = mean(0, t + 1);
        let (p1, m1) = mean(t + 1, hist.len());
        let d0 = &m0 - &total_mean;
        let d1 = &m1 - &total_mean;
        let var = p0 * &d0 * &d0 + p1 * &d1 * &d1;
        if best.as_ref().is_none_or(|(_, b)| var > *b) {
            best = Some((t, var));
        }
    }
    best.filter(|(_, v)| !v.is_zero()).map(|(t, _)| t)
}

/// Upper-tail p-value of Pearson's statistic for observed counts against
/// expected probabilities.
pub fn chi_square_p(observed: &[u64], probs: &[f64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    let n: u64 = observed.iter().sum();
    let stat: f64 = observed
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = n as f64 * p;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((probs.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

/// Random histogram with a mix of empty, sparse and dense bins.
pub fn random_histogram<R: Rng>(rng: &mut R) -> [u64; 256] {
    let mut h = [0u64; 256];
    let density = rng.random_range(0.02..1.0);
    let cap = *[2u64, 10, 1000].get(rng.random_range(0..3)).unwrap();
    for b in h.iter_mut() {
        if rng.random_bool(density) {
            *b = rng.random_range(1..=cap);
        }
    }
    h
}
