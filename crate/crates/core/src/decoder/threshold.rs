use super::{DecodeError, DecoderConfig, JointDistribution};

pub const OTSU_BINS: usize = 256;

/// Zeroes every cell below `epsilon_b`.
pub fn static_threshold(joint: &mut JointDistribution, epsilon_b: f64) {
    for v in joint.values_mut() {
        if *v < epsilon_b {
            *v = 0.0;
        }
    }
}

/// Normalized Gaussian weights for an odd `size >= 3`, with
/// `sigma = size / 6` so the kernel spans about three sigma each side.
pub fn gaussian_kernel(size: usize) -> Result<Vec<f64>, DecodeError> {
    if size < 3 || size.is_multiple_of(2) {
        return Err(DecodeError::BadKernel(size));
    }
    let sigma = size as f64 / 6.0;
    let r = (size / 2) as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / s).collect())
}

fn mirror(i: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let m = i.rem_euclid(period) as usize;
    if m < len {
        m
    } else {
        2 * len - 1 - m
    }
}

/// Separable Gaussian blur along every axis of the joint.
///
/// Borders use half-sample symmetric reflection (`x[-1] = x[0]`), which
/// keeps constant tensors unchanged and conserves total mass.
pub fn gaussian_blur(joint: &mut JointDistribution, kernel_size: usize) -> Result<(), DecodeError> {
    let kernel = gaussian_kernel(kernel_size)?;
    let r = (kernel.len() / 2) as isize;
    let shape = joint.shape();
    let values = joint.values_mut();
    let mut line = Vec::new();
    for axis in 0..shape.len() {
        let len = shape[axis];
        let stride: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for inner in 0..stride {
                let base = o * len * stride + inner;
                line.clear();
                line.extend((0..len).map(|i| values[base + i * stride]));
                for i in 0..len {
                    let mut acc = 0.0;
                    for (j, w) in kernel.iter().enumerate() {
                        let src = mirror(i as isize + j as isize - r, len);
                        acc += w * line[src];
                    }
                    values[base + i * stride] = acc;
                }
            }
        }
    }
    Ok(())
}

/// Histogram bin of a positive value on `[0, max]`.
pub fn bin_of(value: f64, max: f64) -> usize {
    (((value / max) * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1)
}

/// 256-bin histogram of the positive entries over `[0, max]`, with `max`.
/// `None` when no entry is positive.
pub fn otsu_histogram(values: &[f64]) -> Option<([u64; OTSU_BINS], f64)> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return None;
    }
    let mut hist = [0u64; OTSU_BINS];
    for &v in values.iter().filter(|&&v| v > 0.0) {
        hist[bin_of(v, max)] += 1;
    }
    Some((hist, max))
}

/// `a * b` as a 256-bit `(high, low)` pair.
fn mul_wide(a: u128, b: u64) -> (u128, u128) {
    let lo_part = (a as u64 as u128) * b as u128;
    let hi_part = (a >> 64) * b as u128;
    let (lo, carry) = lo_part.overflowing_add(hi_part << 64);
    ((hi_part >> 64) + carry as u128, lo)
}

/// Between-class variance of the split after each bin, scaled by the
/// squared total, as an exact fraction `num^2 / den`:
/// `w0 w1 (mu0 - mu1)^2 = (s0 w1 - s1 w0)^2 / (w0 w1)`.
fn split_score(w0: u64, s0: u64, w1: u64, s1: u64) -> (u128, u64) {
    let a = s0 as u128 * w1 as u128;
    let b = s1 as u128 * w0 as u128;
    let d = a.abs_diff(b);
    (d * d, w0 * w1)
}

/// Last bin of the lower class maximizing between-class variance, lowest
/// bin on ties. `None` for one-class histograms. Scores are compared
/// exactly in integer arithmetic.
pub fn otsu_bin(hist: &[u64; OTSU_BINS]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    let sum_all: u64 = hist.iter().enumerate().map(|(i, &h)| i as u64 * h).sum();
    let mut w0 = 0u64;
    let mut s0 = 0u64;
    let mut best: Option<(usize, (u128, u64))> = None;
    for (b, &h) in hist.iter().enumerate() {
        w0 += h;
        s0 += b as u64 * h;
        if w0 == 0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0 {
            break;
        }
        let score = split_score(w0, s0, w1, sum_all - s0);
        let better = match best {
            None => true,
            // num / den > best_num / best_den
            Some((_, (bn, bd))) => mul_wide(score.0, bd) > mul_wide(bn, score.1),
        };
        if better {
            best = Some((b, score));
        }
    }
    best.filter(|&(_, (num, _))| num > 0).map(|(b, _)| b)
}

/// Otsu threshold over the positive entries: the upper edge of the best
/// lower-class bin, or 0 when there is nothing to separate.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    match otsu_histogram(values) {
        Some((hist, max)) => match otsu_bin(&hist) {
            Some(b) => (b + 1) as f64 * max / OTSU_BINS as f64,
            None => 0.0,
        },
        None => 0.0,
    }
}

/// Zeroes the cells whose histogram bin falls in Otsu's lower class.
/// Returns the threshold used (0 when nothing was zeroed by design).
pub(super) fn otsu_zero(joint: &mut JointDistribution) -> f64 {
    let Some((hist, max)) = otsu_histogram(joint.values()) else {
        return 0.0;
    };
    let Some(cut) = otsu_bin(&hist) else {
        return 0.0;
    };
    for v in joint.values_mut() {
        if *v > 0.0 && bin_of(*v, max) <= cut {
            *v = 0.0;
        }
    }
    (cut + 1) as f64 * max / OTSU_BINS as f64
}

/// Static zeroing at `epsilon_b`, then (if enabled) optional blur and Otsu
/// zeroing. Returns the Otsu threshold, or 0 when adaptive thresholding is
/// off.
pub fn adaptive_threshold(
    joint: &mut JointDistribution,
    epsilon_b: f64,
    config: &DecoderConfig,
) -> Result<f64, DecodeError> {
    static_threshold(joint, epsilon_b);
    if !config.adaptive_thresholding {
        return Ok(0.0);
    }
    if let Some(ks) = config.blur_kernel {
        gaussian_blur(joint, ks)?;
    }
    Ok(otsu_zero(joint))
}
