use multitok_core::decoder::DecoderConfig;
use multitok_core::lm::{MultiHeadLm, UniformLm};
use multitok_core::metrics::{
    parse_epsilon_grid, ppl_dynamic, ppl_joint, ppl_n, speedup_and_mix, sweep, write_sweep_csv, MetricsReport,
};
use multitok_core::model::{ModelConfig, MultiHeadModel};
use multitok_core::ngram::MaskSet;
use multitok_core::vocab::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(v: usize, seed: u64) -> MultiHeadModel {
    let cfg = ModelConfig {
        vocab_size: v,
        d_model: 8,
        stem_layers: 1,
        n_heads: 3,
        context_len: 32,
        attn_heads: 2,
    };
    let mut m = MultiHeadModel::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in m.params_mut().collect_mut() {
        for x in p.data.iter_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    m
}

fn random_seqs(v: usize, n: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TokenSequence::new((0..len).map(|_| rng.random_range(0..v as u32)).collect()))
        .collect()
}

/// `ln p(target)` computed one scalar at a time.
fn scalar_log_prob(row: &[f64], target: usize) -> f64 {
    let mut m = row[0];
    for &z in row {
        if z > m {
            m = z;
        }
    }
    let mut s = 0.0;
    for &z in row {
        s += (z - m).exp();
    }
    row[target] - m - s.ln()
}

#[test]
fn losses_and_perplexities_match_scalar_reference() {
    let v = 5;
    let m = small_model(v, 1);
    let seq = random_seqs(v, 1, 20, 2).remove(0);
    let x = seq.as_slice();
    let l = x.len();
    let logits = m.sequence_logits(&x[..l - 1]).unwrap();
    let lp = |head: usize, p: usize, target: u32| {
        let row: Vec<f64> = logits[head - 1].row(p).to_vec();
        scalar_log_prob(&row, target as usize)
    };

    let per_head = m.head_losses(std::slice::from_ref(&seq)).unwrap();
    for n in 1..=3 {
        let mut nll = 0.0;
        for t in 0..l - n {
            nll -= lp(n, t, x[t + n]);
        }
        let want = nll / (l - n) as f64;
        assert!((per_head[n - 1] - want).abs() < 1e-9, "L_T{n}");
        let got = ppl_n(&m, std::slice::from_ref(&seq), n).unwrap();
        assert!((got.ln() - want).abs() < 1e-9, "PPL_{n}");
    }
    let (total, _) = m.loss_modified_clm(std::slice::from_ref(&seq)).unwrap();
    assert!((total - per_head.iter().sum::<f64>()).abs() < 1e-12);

    for n in 2..=3 {
        let mut nll = 0.0;
        for t in 0..l - n {
            for i in 1..=n {
                nll -= lp(i, t, x[t + i]);
            }
        }
        let want = nll / (n * (l - n)) as f64;
        let got = ppl_joint(&m, std::slice::from_ref(&seq), n).unwrap();
        assert!((got.ln() - want).abs() < 1e-9, "PPL_1:{n}");
    }
}

#[test]
fn dynamic_perplexity_at_epsilon_one_is_first_head() {
    let v = 9;
    let m = small_model(v, 3);
    let val = random_seqs(v, 7, 17, 4);
    let masks = MaskSet::identity(3, v).unwrap();
    let cfg = DecoderConfig {
        epsilon_b: 1.0,
        ..DecoderConfig::default()
    };
    let d = ppl_dynamic(&m, &val, &cfg, &masks).unwrap();
    assert_eq!(d.ppl.to_bits(), ppl_n(&m, &val, 1).unwrap().to_bits());
    let (speedup, mix) = speedup_and_mix(&d.trace, 3).unwrap();
    assert_eq!(speedup, 1.0);
    assert_eq!(mix, vec![1.0, 0.0, 0.0]);
}

#[test]
fn dynamic_walk_at_epsilon_zero_takes_full_steps() {
    let v = 9;
    let m = small_model(v, 5);
    let masks = MaskSet::identity(3, v).unwrap();
    let cfg = DecoderConfig {
        epsilon_b: 0.0,
        ..DecoderConfig::default()
    };
    for len in [2usize, 3, 4, 10, 11, 12] {
        let val = random_seqs(v, 1, len, len as u64);
        let d = ppl_dynamic(&m, &val, &cfg, &masks).unwrap();
        assert_eq!(d.trace.forward_passes, (len - 1).div_ceil(3), "len {len}");
        assert_eq!(d.trace.tokens(), len - 1);
        assert!(d.trace.steps[..d.trace.steps.len() - 1].iter().all(|s| s.emitted == 3));
    }
}

#[test]
fn speedup_stays_within_bounds_over_the_grid() {
    let v = 9;
    let m = small_model(v, 6);
    let val = random_seqs(v, 5, 20, 7);
    let masks = MaskSet::identity(3, v).unwrap();
    for eps in parse_epsilon_grid("0:1:0.1").unwrap() {
        let cfg = DecoderConfig {
            epsilon_b: eps,
            ..DecoderConfig::default()
        };
        let r = MetricsReport::evaluate(&m, &val, &cfg, &masks).unwrap();
        assert!((1.0..=3.0).contains(&r.speedup), "eps {eps}: {}", r.speedup);
        assert!((r.mix.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.ppl_d.is_finite() && r.ppl_d > 1.0);
    }
}

#[test]
fn uniform_model_perplexities_equal_vocab_size() {
    let v = 256;
    let m = UniformLm {
        n_heads: 3,
        vocab_size: v,
        context_len: 64,
    };
    let val = random_seqs(v, 4, 40, 8);
    let masks = MaskSet::identity(3, v).unwrap();
    let r = MetricsReport::evaluate(&m, &val, &DecoderConfig::default(), &masks).unwrap();
    for p in r.ppl_n.iter().chain(&r.ppl_joint).chain([&r.ppl_d]) {
        assert!((p - v as f64).abs() < 1e-6, "{p}");
    }
}

#[test]
fn sweep_csv_is_reproducible() {
    let v = 7;
    let m = small_model(v, 9);
    let val = random_seqs(v, 4, 15, 10);
    let masks = MaskSet::identity(3, v).unwrap();
    let grid = parse_epsilon_grid("0:1:0.5").unwrap();
    assert_eq!(grid, vec![0.0, 0.5, 1.0]);
    let run = || {
        let rows = sweep(&m, &val, &DecoderConfig::default(), &masks, &grid).unwrap();
        let mut out = Vec::new();
        write_sweep_csv(&rows, &mut out).unwrap();
        out
    };
    let a = run();
    assert_eq!(a, run());
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epsilon_b,ppl_d,speedup,mix1,mix2,mix3");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("1,"));
}
