//! Entropy-regularized transport objective for joints over `n` heads, its
//! closed-form minimizer and a numeric mirror-descent minimizer to check it
//! against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::decoder::JointDistribution;

/// Largest joint the numeric minimizer accepts.
pub const MAX_CELLS: usize = 10_000;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("closed form needs eps2 = 0, got {0}")]
    NonZeroEps2(f64),
    #[error("no convergence after {iterations} iterations, last objective change {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },
}

/// `min_p  <p, c> + eps1 KL(p || prod f_i) + eps2 sum_i KL(p_i || f_i)`
/// over the simplex of joints on `V^n` cells, `p_i` being the marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct OtProblem {
    marginals: Vec<Vec<f64>>,
    /// Row-major over `V^n`, last axis fastest.
    cost: Vec<f64>,
    eps1: f64,
    eps2: f64,
}

impl OtProblem {
    pub fn new(marginals: Vec<Vec<f64>>, cost: Vec<f64>, eps1: f64, eps2: f64) -> Result<Self, OtError> {
        let bad = |m: String| Err(OtError::Invalid(m));
        if marginals.is_empty() {
            return bad("no marginals".into());
        }
        let v = marginals[0].len();
        if v == 0 || marginals.iter().any(|f| f.len() != v) {
            return bad("marginals must share one nonzero length".into());
        }
        for (i, f) in marginals.iter().enumerate() {
            if f.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                return bad(format!("marginal {} has a nonpositive entry", i + 1));
            }
            let s: f64 = f.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("marginal {} sums to {s}", i + 1));
            }
        }
        let cells = v.pow(marginals.len() as u32);
        if cost.len() != cells || cost.iter().any(|c| !c.is_finite()) {
            return bad(format!("cost needs {cells} finite entries"));
        }
        if !(eps1.is_finite() && eps1 > 0.0) {
            return bad(format!("eps1 {eps1} must be positive"));
        }
        if !(eps2.is_finite() && eps2 >= 0.0) {
            return bad(format!("eps2 {eps2} must be nonnegative"));
        }
        Ok(Self {
            marginals,
            cost,
            eps1,
            eps2,
        })
    }

    /// The cost `-ln(ratio)` of co-occurrence ratios.
    pub fn from_ratios(marginals: Vec<Vec<f64>>, ratios: &[f64], eps1: f64, eps2: f64) -> Result<Self, OtError> {
        if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(OtError::Invalid("ratios must be positive".into()));
        }
        Self::new(marginals, ratios.iter().map(|r| -r.ln()).collect(), eps1, eps2)
    }

    pub fn order(&self) -> usize {
        self.marginals.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.marginals[0].len()
    }

    pub fn cells(&self) -> usize {
        self.cost.len()
    }

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    /// Product of the marginals, row-major.
    pub fn independent(&self) -> Vec<f64> {
        let v = self.vocab_size();
        (0..self.cells())
            .map(|mut flat| {
                let mut p = 1.0;
                for f in self.marginals.iter().rev() {
                    p *= f[flat % v];
                    flat /= v;
                }
                p
            })
            .collect()
    }

    fn marginal_of(&self, p: &[f64], axis: usize) -> Vec<f64> {
        let v = self.vocab_size();
        let n = self.order();
        let stride = v.pow((n - 1 - axis) as u32);
        let mut out = vec![0.0; v];
        for (flat, &x) in p.iter().enumerate() {
            out[(flat / stride) % v] += x;
        }
        out
    }

    pub fn objective(&self, p: &[f64]) -> f64 {
        let q = self.independent();
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .filter(|(x, _)| **x > 0.0)
                .map(|(x, y)| x * (x / y).ln())
                .sum()
        };
        let transport: f64 = p.iter().zip(&self.cost).map(|(a, c)| a * c).sum();
        let mut total = transport + self.eps1 * kl(p, &q);
        if self.eps2 > 0.0 {
            for (i, f) in self.marginals.iter().enumerate() {
                total += self.eps2 * kl(&self.marginal_of(p, i), f);
            }
        }
        total
    }

    fn as_joint(&self, values: Vec<f64>) -> JointDistribution {
        let axis: Vec<u32> = (0..self.vocab_size() as u32).collect();
        JointDistribution::new(vec![axis; self.order()], values).expect("valid joint")
    }
}

fn normalize_logs(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// `p ∝ prod f_i · exp(-c / eps1)`; with `c = -ln(ratio)` this is the
/// co-occurrence masked joint with ratios raised to `1 / eps1`.
pub fn closed_form_solution(problem: &OtProblem) -> Result<JointDistribution, OtError> {
    if problem.eps2 != 0.0 {
        return Err(OtError::NonZeroEps2(problem.eps2));
    }
    let logs: Vec<f64> = problem
        .independent()
        .iter()
        .zip(&problem.cost)
        .map(|(q, c)| q.ln() - c / problem.eps1)
        .collect();
    Ok(problem.as_joint(normalize_logs(&logs)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MirrorDescent {
    pub max_iterations: usize,
    /// Stop once the objective changes by less than this.
    pub tolerance: f64,
}

impl Default for MirrorDescent {
    fn default() -> Self {
        Self {
            max_iterations: 200_000,
            tolerance: 1e-12,
        }
    }
}

/// Exponentiated-gradient descent on the simplex from the uniform joint,
/// step `1 / (2 (eps1 + n eps2))`. Converged once the objective changes by
/// less than the tolerance and the log-iterate has settled.
pub fn numeric_minimizer(problem: &OtProblem, opts: MirrorDescent) -> Result<JointDistribution, OtError> {
    if problem.cells() > MAX_CELLS {
        return Err(OtError::Invalid(format!("{} cells exceed {MAX_CELLS}", problem.cells())));
    }
    let n = problem.order();
    let v = problem.vocab_size();
    let q = problem.independent();
    let ln_q: Vec<f64> = q.iter().map(|x| x.ln()).collect();
    let step = 1.0 / (2.0 * (problem.eps1 + n as f64 * problem.eps2));
    let mut logp = vec![-(problem.cells() as f64).ln(); problem.cells()];
    let mut p = normalize_logs(&logp);
    let mut obj = problem.objective(&p);
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        let marg_terms: Vec<Vec<f64>> = if problem.eps2 > 0.0 {
            (0..n)
                .map(|i| {
                    problem
                        .marginal_of(&p, i)
                        .iter()
                        .zip(&problem.marginals[i])
                        .map(|(a, f)| (a / f).ln())
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        let prev = logp.clone();
        for flat in 0..p.len() {
            let mut g = problem.cost[flat] + problem.eps1 * (logp[flat] - ln_q[flat]);
            if problem.eps2 > 0.0 {
                let mut rest = flat;
                for i in (0..n).rev() {
                    g += problem.eps2 * marg_terms[i][rest % v];
                    rest /= v;
                }
            }
            logp[flat] -= step * g;
        }
        p = normalize_logs(&logp);
        let lse = p
            .iter()
            .zip(&logp)
            .find(|(x, _)| **x > 0.0)
            .map(|(x, l)| l - x.ln())
            .unwrap_or(0.0);
        logp.iter_mut().for_each(|l| *l -= lse);
        let shift = logp.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let next_obj = problem.objective(&p);
        residual = (next_obj - obj).abs();
        obj = next_obj;
        if residual < opts.tolerance && shift < 1e-9 {
            return Ok(problem.as_joint(p));
        }
    }
    Err(OtError::NoConvergence {
        iterations: opts.max_iterations,
        residual,
    })
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// A random proper distribution with every entry at least `1 / (10 v)`.
fn random_marginal<R: Rng>(v: usize, rng: &mut R) -> Vec<f64> {
    let mut f: Vec<f64> = (0..v).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = f.iter().sum();
    f.iter_mut().for_each(|x| *x /= s);
    f
}

/// A random order-2 problem with ratios in `[1/4, 4]`, `eps1` in
/// `[0.5, 2]` and `eps2 = 0`.
pub fn random_instance<R: Rng>(v: usize, rng: &mut R) -> OtProblem {
    let marginals = vec![random_marginal(v, rng), random_marginal(v, rng)];
    let ratios: Vec<f64> = (0..v * v).map(|_| 4f64.powf(rng.random_range(-1.0..1.0))).collect();
    let eps1 = rng.random_range(0.5..2.0);
    OtProblem::from_ratios(marginals, &ratios, eps1, 0.0).expect("valid random instance")
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtCheckReport {
    pub trials: usize,
    pub max_tv: f64,
    pub tolerance: f64,
}

impl OtCheckReport {
    pub fn passed(&self) -> bool {
        self.max_tv < self.tolerance
    }
}

/// Compares the closed form with the numeric minimizer on `trials` random
/// instances. `vocab` fixes the vocabulary size; otherwise it is drawn
/// from `2..=5`.
pub fn run_ot_check(trials: usize, vocab: Option<usize>, seed: u64, tolerance: f64) -> Result<OtCheckReport, OtError> {
    if vocab.is_some_and(|v| v == 0 || v * v > MAX_CELLS) {
        return Err(OtError::Invalid(format!("vocabulary size {vocab:?} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_tv: f64 = 0.0;
    for _ in 0..trials {
        let v = vocab.unwrap_or_else(|| rng.random_range(2..=5));
        let p = random_instance(v, &mut rng);
        let closed = closed_form_solution(&p)?;
        let numeric = numeric_minimizer(&p, MirrorDescent::default())?;
        max_tv = max_tv.max(total_variation(closed.values(), numeric.values()));
    }
    Ok(OtCheckReport {
        trials,
        max_tv,
        tolerance,
    })
}
