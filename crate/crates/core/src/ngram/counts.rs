use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Gram, MaskError, MAX_ORDER};
use crate::vocab::TokenSequence;

/// Environment variable selecting the number of counting shards.
pub const THREADS_ENV: &str = "DYNAMO_THREADS";

/// Sparse counts of length-`order` windows of adjacent tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramCounts {
    order: usize,
    vocab_size: usize,
    total_positions: u64,
    counts: HashMap<Gram, u64>,
}

/// Optional subsampling of counted windows, used for quadruplet masks
/// where exhaustive counting is too large.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Subsample {
    pub fraction: f64,
    pub seed: u64,
}

impl NgramCounts {
    pub fn empty(order: usize, vocab_size: usize) -> Result<Self, MaskError> {
        check_order(order)?;
        Ok(Self {
            order,
            vocab_size,
            total_positions: 0,
            counts: HashMap::new(),
        })
    }

    /// Builds counts from explicit tuples, e.g. exact expected counts.
    /// `total_positions` is the sum of the supplied counts.
    pub fn from_counts<I>(order: usize, vocab_size: usize, entries: I) -> Result<Self, MaskError>
    where
        I: IntoIterator<Item = (Vec<u32>, u64)>,
    {
        let mut out = Self::empty(order, vocab_size)?;
        for (tuple, c) in entries {
            if tuple.len() != order {
                return Err(MaskError::OrderMismatch {
                    expected: order,
                    found: tuple.len(),
                });
            }
            if let Some(&bad) = tuple.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(MaskError::TokenOutOfRange { id: bad, vocab_size });
            }
            if c == 0 {
                continue;
            }
            *out.counts.entry(Gram::new(&tuple)).or_insert(0) += c;
            out.total_positions += c;
        }
        Ok(out)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn total_positions(&self) -> u64 {
        self.total_positions
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, tuple: &[u32]) -> u64 {
        self.counts.get(&Gram::new(tuple)).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Gram, u64)> {
        self.counts.iter().map(|(g, &c)| (g, c))
    }

    /// Merges another shard into `self`. Associative and commutative.
    pub fn merge(&mut self, other: &NgramCounts) -> Result<(), MaskError> {
        if other.order != self.order {
            return Err(MaskError::OrderMismatch {
                expected: self.order,
                found: other.order,
            });
        }
        if other.vocab_size != self.vocab_size {
            return Err(MaskError::VocabMismatch {
                left: self.vocab_size,
                right: other.vocab_size,
            });
        }
        for (g, &c) in &other.counts {
            *self.counts.entry(*g).or_insert(0) += c;
        }
        self.total_positions += other.total_positions;
        Ok(())
    }

    fn add_sequence(&mut self, ids: &[u32], sub: Option<(&mut ChaCha8Rng, f64)>) {
        if ids.len() < self.order {
            return;
        }
        match sub {
            None => {
                for w in ids.windows(self.order) {
                    *self.counts.entry(Gram::new(w)).or_insert(0) += 1;
                    self.total_positions += 1;
                }
            }
            Some((rng, fraction)) => {
                for w in ids.windows(self.order) {
                    if rng.random::<f64>() < fraction {
                        *self.counts.entry(Gram::new(w)).or_insert(0) += 1;
                        self.total_positions += 1;
                    }
                }
            }
        }
    }
}

fn check_order(order: usize) -> Result<(), MaskError> {
    if (1..=MAX_ORDER).contains(&order) {
        Ok(())
    } else {
        Err(MaskError::BadOrder(order))
    }
}

/// Counts all length-`order` windows of every sequence on one thread.
pub fn count_ngrams(
    sequences: &[TokenSequence],
    order: usize,
    vocab_size: usize,
) -> Result<NgramCounts, MaskError> {
    count_ngrams_with(sequences, order, vocab_size, None, 1)
}

/// Counts windows, optionally subsampled, sharding the sequences over
/// `shards` worker threads. Each sequence draws its subsampling stream
/// from `seed` and its index, so results do not depend on `shards`.
pub fn count_ngrams_with(
    sequences: &[TokenSequence],
    order: usize,
    vocab_size: usize,
    subsample: Option<Subsample>,
    shards: usize,
) -> Result<NgramCounts, MaskError> {
    check_order(order)?;
    if let Some(s) = subsample {
        if !(s.fraction > 0.0 && s.fraction <= 1.0) {
            return Err(MaskError::BadSubsample(s.fraction));
        }
    }
    for seq in sequences {
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(MaskError::TokenOutOfRange { id: bad, vocab_size });
        }
    }

    let count_range = |start: usize, chunk: &[TokenSequence]| {
        let mut part = NgramCounts {
            order,
            vocab_size,
            total_positions: 0,
            counts: HashMap::new(),
        };
        for (offset, seq) in chunk.iter().enumerate() {
            match subsample {
                Some(s) if s.fraction < 1.0 => {
                    let idx = (start + offset) as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    part.add_sequence(seq, Some((&mut rng, s.fraction)));
                }
                _ => part.add_sequence(seq, None),
            }
        }
        part
    };

    let shards = shards.max(1);
    if shards == 1 || sequences.len() < 2 {
        return Ok(count_range(0, sequences));
    }
    let chunk = sequences.len().div_ceil(shards);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(shards)
        .build()
        .map_err(|e| MaskError::Io(std::io::Error::other(e)))?;
    let parts: Vec<NgramCounts> = pool.install(|| {
        sequences
            .par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| count_range(i * chunk, c))
            .collect()
    });
    let mut iter = parts.into_iter();
    let mut total = iter.next().expect("at least one shard");
    for p in iter {
        total.merge(&p)?;
    }
    Ok(total)
}

/// Shard count from `DYNAMO_THREADS`, defaulting to 1.
pub fn shards_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec())
    }

    #[test]
    fn pair_hand_count() {
        let c = count_ngrams(&[seq(&[0, 1, 0, 1])], 2, 2).unwrap();
        assert_eq!(c.get(&[0, 1]), 2);
        assert_eq!(c.get(&[1, 0]), 1);
        assert_eq!(c.distinct(), 2);
        assert_eq!(c.total_positions(), 3);
    }

    #[test]
    fn triple_hand_count() {
        let c = count_ngrams(&[seq(&[0, 0, 0])], 3, 1).unwrap();
        assert_eq!(c.get(&[0, 0, 0]), 1);
        assert_eq!(c.total_positions(), 1);
    }

    #[test]
    fn short_sequences_and_empty_corpus() {
        let c = count_ngrams(&[seq(&[0]), seq(&[])], 2, 2).unwrap();
        assert_eq!(c.total_positions(), 0);
        let c = count_ngrams(&[], 3, 5).unwrap();
        assert_eq!(c.total_positions(), 0);
    }

    #[test]
    fn rejects_bad_order_and_ids() {
        assert!(matches!(count_ngrams(&[], 0, 2), Err(MaskError::BadOrder(0))));
        assert!(matches!(count_ngrams(&[], 5, 2), Err(MaskError::BadOrder(5))));
        assert!(matches!(
            count_ngrams(&[seq(&[0, 3])], 2, 2),
            Err(MaskError::TokenOutOfRange { id: 3, .. })
        ));
    }

    #[test]
    fn subsampling_keeps_roughly_the_fraction() {
        let long: Vec<u32> = (0..100_000u32).map(|i| i % 7).collect();
        let c = count_ngrams_with(
            &[seq(&long)],
            4,
            7,
            Some(Subsample { fraction: 0.05, seed: 3 }),
            1,
        )
        .unwrap();
        let expect = 0.05 * (long.len() - 3) as f64;
        let sd = (expect * 0.95).sqrt();
        assert!((c.total_positions() as f64 - expect).abs() < 4.0 * sd);
    }

    proptest! {
        #[test]
        fn counts_sum_to_positions_and_sharding_is_invisible(
            seqs in prop::collection::vec(prop::collection::vec(0u32..4, 0..30), 0..20),
            order in 1usize..=4,
            shards in 1usize..5,
        ) {
            let seqs: Vec<TokenSequence> = seqs.into_iter().map(TokenSequence::new).collect();
            let single = count_ngrams(&seqs, order, 4).unwrap();
            let expected: u64 = seqs
                .iter()
                .map(|s| if s.len() >= order { (s.len() - order + 1) as u64 } else { 0 })
                .sum();
            prop_assert_eq!(single.total_positions(), expected);
            prop_assert_eq!(single.iter().map(|(_, c)| c).sum::<u64>(), expected);
            let sharded = count_ngrams_with(&seqs, order, 4, None, shards).unwrap();
            prop_assert_eq!(sharded, single);
        }

        #[test]
        fn merge_is_commutative(
            a in prop::collection::vec(0u32..3, 0..40),
            b in prop::collection::vec(0u32..3, 0..40),
        ) {
            let ca = count_ngrams(&[TokenSequence::new(a)], 2, 3).unwrap();
            let cb = count_ngrams(&[TokenSequence::new(b)], 2, 3).unwrap();
            let mut ab = ca.clone();
            ab.merge(&cb).unwrap();
            let mut ba = cb.clone();
            ba.merge(&ca).unwrap();
            prop_assert_eq!(ab, ba);
        }
    }
}
