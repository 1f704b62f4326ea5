use super::{DecodeError, HeadDistribution};
use crate::ngram::{apply_transparency, CooccurrenceMask};

/// Dense rank-n tensor over the candidate sets of n heads, row-major with
/// the last head's axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    axes: Vec<Vec<u32>>,
    values: Vec<f64>,
}

impl JointDistribution {
    /// Builds a tensor from explicit axes and values.
    pub fn new(axes: Vec<Vec<u32>>, values: Vec<f64>) -> Result<Self, DecodeError> {
        if axes.is_empty() || axes.iter().any(Vec::is_empty) {
            return Err(DecodeError::HeadMismatch("joint needs nonempty axes".into()));
        }
        let cells: usize = axes.iter().map(Vec::len).product();
        if cells != values.len() {
            return Err(DecodeError::HeadMismatch(format!(
                "{} values for {} cells",
                values.len(),
                cells
            )));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DecodeError::BadProbability(i));
        }
        Ok(Self { axes, values })
    }

    /// The order-1 "joint" of a single truncated head.
    pub fn from_head(head: &HeadDistribution) -> Self {
        Self {
            axes: vec![head.topk_ids().to_vec()],
            values: head.topk_probs().to_vec(),
        }
    }

    pub fn order(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Vec<u32>] {
        &self.axes
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Per-axis candidate positions of a flat cell index.
    pub fn position(&self, mut flat: usize) -> Vec<usize> {
        let mut pos = vec![0; self.axes.len()];
        for (a, axis) in self.axes.iter().enumerate().rev() {
            pos[a] = flat % axis.len();
            flat /= axis.len();
        }
        pos
    }

    /// Token ids of a flat cell index.
    pub fn tuple(&self, flat: usize) -> Vec<u32> {
        self.position(flat)
            .into_iter()
            .zip(&self.axes)
            .map(|(p, axis)| axis[p])
            .collect()
    }

    /// Value at per-axis candidate positions.
    pub fn get(&self, pos: &[usize]) -> f64 {
        let mut flat = 0;
        for (p, axis) in pos.iter().zip(&self.axes) {
            flat = flat * axis.len() + p;
        }
        self.values[flat]
    }
}

/// Outer product of the heads' top-k probabilities, reweighted per cell by
/// the co-occurrence ratio raised to `alpha_c`.
///
/// Cells are capped at 1: they estimate probabilities of a single tuple.
/// With `alpha_c = 0` the mask is not consulted.
pub fn build_joint(
    heads: &[HeadDistribution],
    mask: &CooccurrenceMask,
    alpha_c: f64,
) -> Result<JointDistribution, DecodeError> {
    let n = heads.len();
    if n < 2 {
        return Err(DecodeError::HeadMismatch(format!("joint needs at least 2 heads, got {n}")));
    }
    if mask.order() != n {
        return Err(DecodeError::MaskOrder {
            expected: n,
            found: mask.order(),
        });
    }
    let k = heads[0].k();
    if heads.iter().any(|h| h.k() != k) {
        return Err(DecodeError::HeadMismatch("heads truncated to different k".into()));
    }
    if !(0.0..=1.0).contains(&alpha_c) {
        return Err(DecodeError::Config(format!("alpha_c {alpha_c} outside [0, 1]")));
    }

    let axes: Vec<Vec<u32>> = heads.iter().map(|h| h.topk_ids().to_vec()).collect();
    let cells = k.pow(n as u32);
    let mut values = Vec::with_capacity(cells);
    let mut pos = vec![0usize; n];
    let mut tuple = vec![0u32; n];
    for _ in 0..cells {
        let mut v = 1.0;
        for (i, h) in heads.iter().enumerate() {
            v *= h.topk_probs()[pos[i]];
            tuple[i] = axes[i][pos[i]];
        }
        if alpha_c > 0.0 {
            v *= apply_transparency(mask.ratio(&tuple), alpha_c)?;
        }
        values.push(v.min(1.0));
        // odometer increment, last axis fastest
        for a in (0..n).rev() {
            pos[a] += 1;
            if pos[a] < k {
                break;
            }
            pos[a] = 0;
        }
    }
    Ok(JointDistribution { axes, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::topk_truncate;

    fn head(i: usize, p: &[f64]) -> HeadDistribution {
        let h = HeadDistribution::from_probs(i, p.to_vec()).unwrap();
        topk_truncate(&h, p.len()).unwrap()
    }

    #[test]
    fn plain_outer_product() {
        let heads = [head(1, &[0.6, 0.4]), head(2, &[0.7, 0.3])];
        let m = CooccurrenceMask::identity(2, 2).unwrap();
        let j = build_joint(&heads, &m, 1.0).unwrap();
        let want = [0.42, 0.18, 0.28, 0.12];
        for (a, b) in j.values().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(j.tuple(1), vec![0, 1]);
        assert_eq!(j.tuple(2), vec![1, 0]);
    }

    #[test]
    fn single_ratio_doubles_one_cell() {
        let heads = [head(1, &[0.6, 0.4]), head(2, &[0.7, 0.3])];
        let id = CooccurrenceMask::identity(2, 2).unwrap();
        let m = CooccurrenceMask::from_entries(2, 2, 0.0, 1.0, [(vec![0, 1], 2.0)]).unwrap();
        let plain = build_joint(&heads, &id, 1.0).unwrap();
        let masked = build_joint(&heads, &m, 1.0).unwrap();
        for i in 0..4 {
            let f = if i == 1 { 2.0 } else { 1.0 };
            assert_eq!(masked.values()[i], plain.values()[i] * f);
        }
    }

    #[test]
    fn zero_transparency_ignores_mask() {
        let heads = [head(1, &[0.6, 0.4]), head(2, &[0.7, 0.3])];
        let m = CooccurrenceMask::from_entries(2, 2, 0.0, 3.0, [(vec![0, 1], 2.0)]).unwrap();
        let j = build_joint(&heads, &m, 0.0).unwrap();
        assert_eq!(j.values(), &[0.6 * 0.7, 0.6 * 0.3, 0.4 * 0.7, 0.4 * 0.3]);
    }

    #[test]
    fn cells_are_capped_at_one() {
        let heads = [head(1, &[0.9, 0.1]), head(2, &[0.9, 0.1])];
        let m = CooccurrenceMask::from_entries(2, 2, 0.0, 1.0, [(vec![0, 0], 50.0)]).unwrap();
        let j = build_joint(&heads, &m, 1.0).unwrap();
        assert_eq!(j.values()[0], 1.0);
    }

    #[test]
    fn mask_order_mismatch() {
        let heads = [head(1, &[0.6, 0.4]), head(2, &[0.7, 0.3])];
        let m = CooccurrenceMask::identity(3, 2).unwrap();
        assert!(matches!(
            build_joint(&heads, &m, 1.0),
            Err(DecodeError::MaskOrder { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn rank3_layout() {
        let heads = [head(1, &[0.5, 0.5]), head(2, &[0.25, 0.75]), head(3, &[0.1, 0.9])];
        let m = CooccurrenceMask::identity(3, 2).unwrap();
        let j = build_joint(&heads, &m, 0.5).unwrap();
        // topk order puts the larger probability first on axes 2 and 3
        assert_eq!(j.axes()[1], vec![1, 0]);
        assert_eq!(j.get(&[0, 0, 1]), 0.5 * 0.75 * 0.1);
        assert_eq!(j.tuple(1), vec![0, 1, 0]);
    }
}
