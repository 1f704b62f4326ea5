use std::collections::HashMap;

use super::{Gram, MaskError, NgramCounts};

/// Lower clamp applied to every ratio.
pub const RATIO_MIN: f64 = 1e-4;
/// Upper clamp applied to every ratio.
pub const RATIO_MAX: f64 = 1e4;

/// Add-`floor` smoothed probability estimates for one order of counts.
///
/// `p(tuple) = (count + floor) / (positions + floor * V^n)`, so the
/// estimate sums to one over all `V^n` cells.
#[derive(Debug, Clone, Copy)]
pub struct SmoothedEstimate<'a> {
    counts: &'a NgramCounts,
    floor: f64,
    denom: f64,
}

impl<'a> SmoothedEstimate<'a> {
    pub fn new(counts: &'a NgramCounts, floor: f64) -> Result<Self, MaskError> {
        if !(floor.is_finite() && floor >= 0.0) {
            return Err(MaskError::BadFloor(floor));
        }
        let cells = (counts.vocab_size() as f64).powi(counts.order() as i32);
        let denom = counts.total_positions() as f64 + floor * cells;
        if denom <= 0.0 {
            return Err(MaskError::NoData);
        }
        Ok(Self { counts, floor, denom })
    }

    pub fn probability(&self, tuple: &[u32]) -> f64 {
        (self.counts.get(tuple) as f64 + self.floor) / self.denom
    }

    /// Probability of any tuple that was never counted.
    pub fn unseen_probability(&self) -> f64 {
        self.floor / self.denom
    }
}

/// Sparse table of co-occurrence ratios for one order `n >= 2`.
///
/// Observed tuples carry `p(tuple) / prod_i p(tuple_i)`; absent tuples
/// read `default_value`. All values are clamped to `[RATIO_MIN, RATIO_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMask {
    pub(super) order: usize,
    pub(super) vocab_size: usize,
    pub(super) smoothing_floor: f64,
    pub(super) default_value: f64,
    pub(super) ratios: HashMap<Gram, f64>,
}

impl CooccurrenceMask {
    /// A mask that leaves every cell unchanged.
    pub fn identity(order: usize, vocab_size: usize) -> Result<Self, MaskError> {
        if !(2..=super::MAX_ORDER).contains(&order) {
            return Err(MaskError::BadOrder(order));
        }
        Ok(Self {
            order,
            vocab_size,
            smoothing_floor: 0.0,
            default_value: 1.0,
            ratios: HashMap::new(),
        })
    }

    /// Assembles a mask from explicit entries. Entries are validated and
    /// clamped like built ones.
    pub fn from_entries<I>(
        order: usize,
        vocab_size: usize,
        smoothing_floor: f64,
        default_value: f64,
        entries: I,
    ) -> Result<Self, MaskError>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        let mut mask = Self::identity(order, vocab_size)?;
        if !(smoothing_floor.is_finite() && smoothing_floor >= 0.0) {
            return Err(MaskError::BadFloor(smoothing_floor));
        }
        if !(default_value.is_finite() && default_value > 0.0) {
            return Err(MaskError::NonPositive(default_value));
        }
        mask.smoothing_floor = smoothing_floor;
        mask.default_value = clamp_ratio(default_value);
        for (tuple, r) in entries {
            if tuple.len() != order {
                return Err(MaskError::OrderMismatch {
                    expected: order,
                    found: tuple.len(),
                });
            }
            if let Some(&bad) = tuple.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(MaskError::TokenOutOfRange { id: bad, vocab_size });
            }
            if !(r.is_finite() && r > 0.0) {
                return Err(MaskError::NonPositive(r));
            }
            mask.ratios.insert(Gram::new(&tuple), clamp_ratio(r));
        }
        Ok(mask)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn smoothing_floor(&self) -> f64 {
        self.smoothing_floor
    }

    pub fn default_value(&self) -> f64 {
        self.default_value
    }

    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    /// Ratio for `tuple`, falling back to the default for absent tuples.
    pub fn ratio(&self, tuple: &[u32]) -> f64 {
        self.ratios.get(&Gram::new(tuple)).copied().unwrap_or(self.default_value)
    }

    /// The stored ratio, if the tuple was observed.
    pub fn stored(&self, tuple: &[u32]) -> Option<f64> {
        self.ratios.get(&Gram::new(tuple)).copied()
    }

    /// Stored entries in ascending tuple order.
    pub fn sorted_entries(&self) -> Vec<(Gram, f64)> {
        let mut v: Vec<(Gram, f64)> = self.ratios.iter().map(|(g, &r)| (*g, r)).collect();
        v.sort_unstable_by_key(|e| e.0);
        v
    }

    /// Bytes used by the coordinate storage: one `(ids, f64)` record per entry.
    pub fn footprint_bytes(&self) -> usize {
        self.ratios.len() * (4 * self.order + 8)
    }
}

fn clamp_ratio(r: f64) -> f64 {
    if r.is_nan() {
        RATIO_MIN
    } else {
        r.clamp(RATIO_MIN, RATIO_MAX)
    }
}

/// Builds the co-occurrence mask from unigram counts and order-`n` counts
/// of the same corpus.
///
/// The default for absent tuples is the smoothed unseen probability
/// relative to a uniform product of marginals, `p_unseen * V^n`.
pub fn build_mask(
    unigrams: &NgramCounts,
    joint: &NgramCounts,
    floor: f64,
) -> Result<CooccurrenceMask, MaskError> {
    if unigrams.order() != 1 {
        return Err(MaskError::OrderMismatch {
            expected: 1,
            found: unigrams.order(),
        });
    }
    if joint.order() < 2 {
        return Err(MaskError::BadOrder(joint.order()));
    }
    if unigrams.vocab_size() != joint.vocab_size() {
        return Err(MaskError::VocabMismatch {
            left: unigrams.vocab_size(),
            right: joint.vocab_size(),
        });
    }
    let n = joint.order();
    let v = joint.vocab_size();
    let uni = SmoothedEstimate::new(unigrams, floor)?;
    let est = SmoothedEstimate::new(joint, floor)?;
    let marginal: Vec<f64> = (0..v as u32).map(|t| uni.probability(&[t])).collect();

    let ratios = joint
        .iter()
        .map(|(g, _)| {
            let denom: f64 = g.ids().iter().map(|&t| marginal[t as usize]).product();
            (*g, clamp_ratio(est.probability(g.ids()) / denom))
        })
        .collect();
    let default_value = clamp_ratio(est.unseen_probability() * (v as f64).powi(n as i32));

    Ok(CooccurrenceMask {
        order: n,
        vocab_size: v,
        smoothing_floor: floor,
        default_value,
        ratios,
    })
}

/// Raises a mask value to the transparency exponent `alpha_c`.
/// `alpha_c = 0` disables masking, `alpha_c = 1` applies it fully.
pub fn apply_transparency(mask_value: f64, alpha_c: f64) -> Result<f64, MaskError> {
    if !(mask_value.is_finite() && mask_value > 0.0) {
        return Err(MaskError::NonPositive(mask_value));
    }
    if !(0.0..=1.0).contains(&alpha_c) {
        return Err(MaskError::BadTransparency(alpha_c));
    }
    Ok(mask_value.powf(alpha_c))
}

/// Masks for orders `2..=n_max`, indexed by order.
#[derive(Debug, Clone, Default)]
pub struct MaskSet {
    masks: Vec<Option<CooccurrenceMask>>,
}

impl MaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Identity masks for every order `2..=n_max`.
    pub fn identity(n_max: usize, vocab_size: usize) -> Result<Self, MaskError> {
        let mut set = Self::new();
        for order in 2..=n_max {
            set.insert(CooccurrenceMask::identity(order, vocab_size)?);
        }
        Ok(set)
    }

    pub fn insert(&mut self, mask: CooccurrenceMask) {
        let o = mask.order();
        if self.masks.len() <= o {
            self.masks.resize(o + 1, None);
        }
        self.masks[o] = Some(mask);
    }

    pub fn get(&self, order: usize) -> Result<&CooccurrenceMask, MaskError> {
        self.masks
            .get(order)
            .and_then(Option::as_ref)
            .ok_or(MaskError::MissingOrder(order))
    }

    /// Fails unless every order `2..=n_max` is present with `vocab_size`.
    pub fn check(&self, n_max: usize, vocab_size: usize) -> Result<(), MaskError> {
        for order in 2..=n_max {
            let m = self.get(order)?;
            if m.vocab_size() != vocab_size {
                return Err(MaskError::VocabMismatch {
                    left: m.vocab_size(),
                    right: vocab_size,
                });
            }
        }
        Ok(())
    }
}

impl FromIterator<CooccurrenceMask> for MaskSet {
    fn from_iter<T: IntoIterator<Item = CooccurrenceMask>>(iter: T) -> Self {
        let mut set = Self::new();
        for m in iter {
            set.insert(m);
        }
        set
    }
}
