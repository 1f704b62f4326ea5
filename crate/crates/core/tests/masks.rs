use multitok_core::ngram::{build_mask, count_ngrams, CooccurrenceMask, NgramCounts, SmoothedEstimate, HEADER_LEN};
use multitok_core::vocab::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn iid_sequence(len: usize, probs: &[f64], seed: u64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..len)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i as u32;
                }
            }
            (probs.len() - 1) as u32
        })
        .collect();
    TokenSequence::new(ids)
}

#[test]
fn iid_pair_counts_within_three_sigma() {
    let p = [0.3, 0.7];
    let seq = iid_sequence(200_000, &p, 1);
    let counts = count_ngrams(std::slice::from_ref(&seq), 2, 2).unwrap();
    let n = counts.total_positions() as f64;
    assert_eq!(n, 199_999.0);
    for a in 0..2u32 {
        for b in 0..2u32 {
            let q = p[a as usize] * p[b as usize];
            let expected = n * q;
            let sigma = (n * q * (1.0 - q)).sqrt();
            let got = counts.get(&[a, b]) as f64;
            assert!(
                (got - expected).abs() < 3.0 * sigma,
                "({a},{b}): {got} vs {expected} ± {sigma}"
            );
        }
    }
}

fn alternating(len: usize) -> Vec<TokenSequence> {
    vec![TokenSequence::new((0..len).map(|i| (i % 2) as u32).collect())]
}

#[test]
fn alternating_corpus_ratio_tends_to_two() {
    let data = alternating(20_000);
    let uni = count_ngrams(&data, 1, 2).unwrap();
    let pairs = count_ngrams(&data, 2, 2).unwrap();
    for floor in [1e-3, 1e-6, 0.0] {
        let m = build_mask(&uni, &pairs, floor).unwrap();
        let r = m.ratio(&[0, 1]);
        assert!((r - 2.0).abs() < 1e-3, "floor {floor}: ratio {r}");
    }
    // floor 0: 10000 (a,b) pairs of 19999, unigrams exactly 1/2
    let m = build_mask(&uni, &pairs, 0.0).unwrap();
    assert_eq!(m.ratio(&[0, 1]), (10_000.0 / 19_999.0) / 0.25);
}

#[test]
fn exact_independence_gives_unit_ratios() {
    // a power-of-two total keeps every quotient exact
    let uni_counts = [1u64, 3, 4, 8];
    let s: u64 = uni_counts.iter().sum();
    assert_eq!(s, 16);
    let uni = NgramCounts::from_counts(1, 4, (0..4u32).map(|a| (vec![a], uni_counts[a as usize]))).unwrap();
    let pairs = NgramCounts::from_counts(
        2,
        4,
        (0..4u32).flat_map(|a| (0..4u32).map(move |b| (vec![a, b], uni_counts[a as usize] * uni_counts[b as usize]))),
    )
    .unwrap();
    let m = build_mask(&uni, &pairs, 0.0).unwrap();
    assert_eq!(m.len(), 16);
    for a in 0..4u32 {
        for b in 0..4u32 {
            assert_eq!(m.ratio(&[a, b]), 1.0, "({a},{b})");
        }
    }

    let uni_counts = [2u64, 5, 7, 11, 13];
    let uni = NgramCounts::from_counts(1, 5, (0..5u32).map(|a| (vec![a], uni_counts[a as usize]))).unwrap();
    let triples = NgramCounts::from_counts(
        3,
        5,
        (0..125u32).map(|i| {
            let t = vec![i / 25, (i / 5) % 5, i % 5];
            let c = t.iter().map(|&x| uni_counts[x as usize]).product();
            (t, c)
        }),
    )
    .unwrap();
    let m = build_mask(&uni, &triples, 0.0).unwrap();
    for (_, r) in m.sorted_entries() {
        assert!((r - 1.0).abs() < 1e-12, "{r}");
    }
}

#[test]
fn smoothed_estimate_is_a_distribution() {
    for (v, order, seed) in [(5usize, 2usize, 1u64), (7, 3, 2), (20, 2, 3)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<TokenSequence> = (0..20)
            .map(|_| TokenSequence::new((0..30).map(|_| rng.random_range(0..v as u32 / 2 + 1)).collect()))
            .collect();
        let counts = count_ngrams(&data, order, v).unwrap();
        for floor in [0.5, 0.01, 2.0] {
            let est = SmoothedEstimate::new(&counts, floor).unwrap();
            let cells = v.pow(order as u32);
            let mut stored = 0.0;
            for (g, _) in counts.iter() {
                stored += est.probability(g.ids());
            }
            let unseen = (cells - counts.distinct()) as f64 * est.unseen_probability();
            assert!((stored + unseen - 1.0).abs() < 1e-9, "v={v} order={order} floor={floor}");
            // brute-force sum over every cell agrees
            let mut all = 0.0;
            for flat in 0..cells {
                let mut t = vec![0u32; order];
                let mut r = flat;
                for slot in t.iter_mut().rev() {
                    *slot = (r % v) as u32;
                    r /= v;
                }
                all += est.probability(&t);
            }
            assert!((all - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn uniform_corpus_ratios_concentrate() {
    let seq = iid_sequence(1_000_000, &[0.25; 4], 9);
    let data = [seq];
    let uni = count_ngrams(&data, 1, 4).unwrap();
    for order in [2, 3] {
        let joint = count_ngrams(&data, order, 4).unwrap();
        let m = build_mask(&uni, &joint, 0.5).unwrap();
        assert_eq!(m.len(), 4usize.pow(order as u32));
        for (g, r) in m.sorted_entries() {
            assert!((0.8..=1.25).contains(&r), "{:?}: {r}", g.ids());
        }
    }
}

#[test]
fn hundred_thousand_entries_file_size() {
    let v = 400u32;
    let entries = (0..100_000u32).map(|i| (vec![i / v, i % v], 1.0 + (i % 7) as f64));
    let m = CooccurrenceMask::from_entries(2, v as usize, 0.5, 0.75, entries).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.mask");
    m.save(&path).unwrap();
    let size = std::fs::metadata(&path).unwrap().len();
    // header: magic 4, version 2, order 1, vocab 4, count 8, floor 8, default 8
    let header = 4 + 2 + 1 + 4 + 8 + 8 + 8;
    assert_eq!(header, HEADER_LEN);
    let record = 2 * 4 + 8;
    assert_eq!(size as usize, header + 100_000 * record + 4);
    let back = CooccurrenceMask::load(&path).unwrap();
    assert_eq!(back, m);
}
