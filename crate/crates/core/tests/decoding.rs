mod common;

use common::{chi_square_p, otsu_oracle, random_histogram};
use multitok_core::decoder::{
    adaptive_threshold, backoff_check, gaussian_blur, otsu_bin, otsu_histogram, sample_joint, static_threshold,
    Backoff, Decoder, DecoderConfig, JointDistribution,
};
use multitok_core::ngram::MaskSet;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square_joint(k: usize, rank: usize, values: Vec<f64>) -> JointDistribution {
    let axes = (0..rank).map(|_| (0..k as u32).collect()).collect();
    JointDistribution::new(axes, values).unwrap()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn random_logits(v: usize, heads: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..heads)
        .map(|_| (0..v).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect()
}

#[test]
fn sampler_follows_fixed_two_by_two_law() {
    let probs = [0.4, 0.3, 0.2, 0.1];
    let j = JointDistribution::new(vec![vec![3, 8], vec![1, 5]], probs.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = [0u64; 4];
    for _ in 0..100_000 {
        let t = sample_joint(&j, &mut rng).unwrap();
        let a = if t[0] == 3 { 0 } else { 1 };
        let b = if t[1] == 1 { 0 } else { 1 };
        counts[a * 2 + b] += 1;
    }
    let p = chi_square_p(&counts, &probs);
    assert!(p > 0.001, "chi-square p = {p}, counts {counts:?}");
}

#[test]
fn sampler_binomial_split_within_three_sigma() {
    let j = JointDistribution::new(vec![vec![0], vec![0, 1]], vec![0.75, 0.25]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 50_000;
    let hits = (0..n).filter(|_| sample_joint(&j, &mut rng).unwrap()[1] == 0).count() as f64;
    let sigma = (n as f64 * 0.75 * 0.25).sqrt();
    assert!((hits - 0.75 * n as f64).abs() < 3.0 * sigma);
}

#[test]
fn epsilon_one_reduces_to_penalized_first_head() {
    let v = 40;
    let masks = MaskSet::identity(3, v).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let cfg = DecoderConfig {
            epsilon_b: 1.0,
            k: 7,
            temperature: 0.9,
            repetition_penalty: 1.3,
            rng_seed: trial,
            ..DecoderConfig::default()
        };
        let mut dec = Decoder::new(cfg.clone(), &masks).unwrap();
        let logits = random_logits(v, 3, &mut rng);
        let context: Vec<u32> = (0..10).map(|_| rng.random_range(0..v as u32)).collect();
        let heads = dec.prepare_heads(&logits, 3).unwrap();
        let d = dec.decide(&heads, &context).unwrap();
        assert_eq!((d.order, d.backoffs), (1, 2));

        // reference: tempered softmax, stable sort by probability, top k,
        // penalty on context tokens
        let z: Vec<f64> = logits[0].iter().map(|x| x / cfg.temperature).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let mut order: Vec<usize> = (0..v).collect();
        order.sort_by(|&a, &b| e[b].partial_cmp(&e[a]).unwrap());
        let top = &order[..cfg.k];
        assert_eq!(d.joint.axes()[0], top.iter().map(|&i| i as u32).collect::<Vec<_>>());
        for (slot, &id) in top.iter().enumerate() {
            let mut want = e[id] / s;
            if context.contains(&(id as u32)) {
                want /= cfg.repetition_penalty;
            }
            let got = d.joint.values()[slot];
            assert!((got - want).abs() < 1e-12, "trial {trial} slot {slot}: {got} vs {want}");
        }
    }
}

#[test]
fn epsilon_zero_always_takes_full_order() {
    let v = 30;
    let masks = MaskSet::identity(3, v).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = DecoderConfig {
        epsilon_b: 0.0,
        k: 6,
        ..DecoderConfig::default()
    };
    let mut dec = Decoder::new(cfg, &masks).unwrap();
    for _ in 0..50 {
        let logits = random_logits(v, 3, &mut rng);
        let heads = dec.prepare_heads(&logits, 3).unwrap();
        let d = dec.decide(&heads, &[1, 2, 3]).unwrap();
        assert_eq!((d.order, d.backoffs), (3, 0));
    }
}

#[test]
fn otsu_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..300 {
        let h = random_histogram(&mut rng);
        assert_eq!(otsu_bin(&h), otsu_oracle(&h), "histogram {i}");
    }
    // symmetric two-peak histogram: every split between the peaks ties
    let mut h = [0u64; 256];
    h[10] = 5;
    h[200] = 5;
    assert_eq!(otsu_bin(&h), Some(10));
    assert_eq!(otsu_oracle(&h), Some(10));
    let mut one = [0u64; 256];
    one[42] = 9;
    assert_eq!(otsu_bin(&one), None);
    assert_eq!(otsu_oracle(&one), None);
}

#[test]
fn otsu_histogram_ignores_zeros_and_bins_by_max() {
    let (h, max) = otsu_histogram(&[0.0, 0.5, 1.0, 0.0, 0.25]).unwrap();
    assert_eq!(max, 1.0);
    assert_eq!(h.iter().sum::<u64>(), 3);
    assert_eq!((h[64], h[128], h[255]), (1, 1, 1));
    assert!(otsu_histogram(&[0.0, 0.0]).is_none());
}

fn joint_strategy(rank: usize, k: usize) -> impl Strategy<Value = JointDistribution> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], k.pow(rank as u32))
        .prop_map(move |v| square_joint(k, rank, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backoff_is_monotone_in_epsilon(
        j in (2usize..=4).prop_flat_map(|r| joint_strategy(r, 3)),
        a in 0.0..=1.0f64,
        b in 0.0..=1.0f64,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let n = j.order();
        if backoff_check(&j, lo, n) == Backoff::BackOff {
            prop_assert_eq!(backoff_check(&j, hi, n), Backoff::BackOff);
        }
    }

    #[test]
    fn accepted_order_is_nonincreasing_in_epsilon(
        seed in 0u64..1000,
        a in 0.0..=1.0f64,
        b in 0.0..=1.0f64,
        blur in prop_oneof![Just(None), Just(Some(3usize)), Just(Some(5))],
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let v = 12;
        let masks = MaskSet::identity(3, v).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_logits(v, 3, &mut rng);
        let order_at = |eps: f64| {
            let cfg = DecoderConfig {
                epsilon_b: eps,
                k: 5,
                temperature: 0.5,
                repetition_penalty: 1.0,
                blur_kernel: blur,
                ..DecoderConfig::default()
            };
            let mut dec = Decoder::new(cfg, &masks).unwrap();
            let heads = dec.prepare_heads(&logits, 3).unwrap();
            dec.decide(&heads, &[]).unwrap().order
        };
        prop_assert!(order_at(lo) >= order_at(hi));
    }

    #[test]
    fn static_threshold_is_idempotent(j in joint_strategy(2, 6), eps in 0.0..=1.0f64) {
        let mut once = j.clone();
        static_threshold(&mut once, eps);
        let mut twice = once.clone();
        static_threshold(&mut twice, eps);
        prop_assert_eq!(once.values(), twice.values());
    }

    #[test]
    fn adaptive_threshold_without_otsu_is_idempotent(j in joint_strategy(3, 4), eps in 0.0..=1.0f64) {
        let cfg = DecoderConfig { adaptive_thresholding: false, blur_kernel: None, ..DecoderConfig::default() };
        let mut once = j.clone();
        adaptive_threshold(&mut once, eps, &cfg).unwrap();
        let mut twice = once.clone();
        adaptive_threshold(&mut twice, eps, &cfg).unwrap();
        prop_assert_eq!(once.values(), twice.values());
    }

    #[test]
    fn repeated_otsu_only_removes_and_keeps_the_peak(j in joint_strategy(2, 8), eps in 0.0..0.5f64) {
        let cfg = DecoderConfig { blur_kernel: None, ..DecoderConfig::default() };
        let mut once = j.clone();
        adaptive_threshold(&mut once, eps, &cfg).unwrap();
        let mut twice = once.clone();
        adaptive_threshold(&mut twice, eps, &cfg).unwrap();
        for (x, y) in once.values().iter().zip(twice.values()) {
            prop_assert!(*y == *x || *y == 0.0);
        }
        prop_assert_eq!(once.max_value(), twice.max_value());
    }

    #[test]
    fn blur_conserves_mass_rank2(
        v in prop::collection::vec(0.0..1.0f64, 2500),
        ks in prop_oneof![Just(3usize), Just(5), Just(7), Just(9)],
    ) {
        let mut j = square_joint(50, 2, normalized(v));
        let before = j.total();
        gaussian_blur(&mut j, ks).unwrap();
        prop_assert!((j.total() - before).abs() < 1e-9);
        prop_assert!(j.values().iter().all(|&x| x >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn blur_conserves_mass_rank3(seed in 0u64..1_000_000, ks in prop_oneof![Just(3usize), Just(5)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..125_000).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut j = square_joint(50, 3, normalized(v));
        let before = j.total();
        gaussian_blur(&mut j, ks).unwrap();
        prop_assert!((j.total() - before).abs() < 1e-9);
    }
}
