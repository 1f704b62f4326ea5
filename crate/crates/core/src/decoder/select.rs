use std::collections::HashSet;

use rand::Rng;

use super::{DecodeError, JointDistribution};

/// Divides by `penalty` every cell whose tuple repeats a token from the
/// last `window` context tokens or repeats a token within itself.
pub fn penalize_repetition(joint: &mut JointDistribution, context: &[u32], penalty: f64, window: usize) {
    if penalty == 1.0 {
        return;
    }
    let recent: HashSet<u32> = context[context.len().saturating_sub(window)..].iter().copied().collect();
    let n = joint.order();
    let repeated: Vec<Vec<bool>> = joint
        .axes()
        .iter()
        .map(|axis| axis.iter().map(|t| recent.contains(t)).collect())
        .collect();
    let axes = joint.axes().to_vec();
    let mut pos = vec![0usize; n];
    for v in joint.values_mut() {
        let mut rep = (0..n).any(|a| repeated[a][pos[a]]);
        if !rep {
            'outer: for a in 0..n {
                for b in a + 1..n {
                    if axes[a][pos[a]] == axes[b][pos[b]] {
                        rep = true;
                        break 'outer;
                    }
                }
            }
        }
        if rep {
            *v /= penalty;
        }
        for a in (0..n).rev() {
            pos[a] += 1;
            if pos[a] < axes[a].len() {
                break;
            }
            pos[a] = 0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backoff {
    BackOff,
    Proceed,
}

/// Backs off unless some cell exceeds `epsilon_b^(n-1)`.
///
/// With cells capped at 1 this makes `epsilon_b = 1` always back off and
/// `epsilon_b = 0` proceed whenever any cell is positive.
pub fn backoff_check(joint: &JointDistribution, epsilon_b: f64, n: usize) -> Backoff {
    let bar = epsilon_b.powi(n.saturating_sub(1) as i32);
    if joint.values().iter().any(|&v| v > bar) {
        Backoff::Proceed
    } else {
        Backoff::BackOff
    }
}

/// Draws one cell with probability proportional to its value by inverse
/// CDF, boundaries resolving toward the lower index.
pub fn sample_joint<R: Rng + ?Sized>(joint: &JointDistribution, rng: &mut R) -> Result<Vec<u32>, DecodeError> {
    let total = joint.total();
    if !(total > 0.0 && total.is_finite()) {
        return Err(DecodeError::AllZero);
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &v) in joint.values().iter().enumerate() {
        if v <= 0.0 {
            continue;
        }
        acc += v;
        last_positive = i;
        if u < acc {
            return Ok(joint.tuple(i));
        }
    }
    Ok(joint.tuple(last_positive))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn joint2(a: [u32; 2], b: [u32; 2], v: [f64; 4]) -> JointDistribution {
        JointDistribution::new(vec![a.to_vec(), b.to_vec()], v.to_vec()).unwrap()
    }

    #[test]
    fn unit_penalty_is_identity() {
        let mut j = joint2([0, 1], [0, 1], [0.4, 0.3, 0.2, 0.1]);
        let before = j.clone();
        penalize_repetition(&mut j, &[0, 1], 1.0, 64);
        assert_eq!(j, before);
    }

    #[test]
    fn context_tail_is_penalized() {
        // tokens a=0, b=1; context ends in a
        let mut j = joint2([0, 1], [0, 1], [0.4, 0.3, 0.2, 0.1]);
        penalize_repetition(&mut j, &[1, 0], 1.1, 1);
        // cells: (a,a) (a,b) (b,a) (b,b); (b,b) is an intra-tuple repeat
        assert_eq!(j.values(), &[0.4 / 1.1, 0.3 / 1.1, 0.2 / 1.1, 0.1 / 1.1]);
    }

    #[test]
    fn intra_tuple_repeats_are_penalized() {
        let mut j = joint2([0, 1], [0, 1], [0.4, 0.3, 0.2, 0.1]);
        penalize_repetition(&mut j, &[5], 2.0, 64);
        assert_eq!(j.values(), &[0.2, 0.3, 0.2, 0.05]);
    }

    #[test]
    fn window_limits_lookback() {
        let mut j = joint2([0, 1], [2, 3], [0.4, 0.3, 0.2, 0.1]);
        penalize_repetition(&mut j, &[0, 9, 9], 2.0, 2);
        assert_eq!(j.values(), &[0.4, 0.3, 0.2, 0.1]);
        penalize_repetition(&mut j, &[0, 9, 9], 2.0, 3);
        assert_eq!(j.values(), &[0.2, 0.15, 0.2, 0.1]);
    }

    #[test]
    fn backoff_rules() {
        let j = joint2([0, 1], [0, 1], [0.4, 0.3, 0.2, 0.1]);
        assert_eq!(backoff_check(&j, 0.0, 2), Backoff::Proceed);
        assert_eq!(backoff_check(&j, 1.0, 2), Backoff::BackOff);
        assert_eq!(backoff_check(&j, 0.5, 2), Backoff::BackOff);
        assert_eq!(backoff_check(&j, 0.3, 2), Backoff::Proceed);
        let j3 = JointDistribution::new(vec![vec![0, 1], vec![0], vec![0]], vec![0.3, 0.1]).unwrap();
        // 0.3 > 0.5^2
        assert_eq!(backoff_check(&j3, 0.5, 3), Backoff::Proceed);
    }

    #[test]
    fn single_cell_always_drawn() {
        let j = joint2([3, 4], [5, 6], [0.0, 0.0, 0.7, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_joint(&j, &mut rng).unwrap(), vec![4, 5]);
        }
    }

    #[test]
    fn all_zero_is_an_error() {
        let j = joint2([0, 1], [0, 1], [0.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_joint(&j, &mut rng), Err(DecodeError::AllZero)));
    }

    #[test]
    fn fixed_seed_reproduces() {
        let j = joint2([0, 1], [0, 1], [0.4, 0.3, 0.2, 0.1]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_joint(&j, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }
}
