//! Small statistics helpers shared across modules.
//!
//! Two percentile conventions are used deliberately: dataset similarity
//! summaries use a nearest-rank rule, while the tiny per-frame percentiles of
//! the feature encoder interpolate linearly (nearest-rank degenerates on
//! four values).

/// Nearest-rank percentile over a sorted slice: the element of rank
/// `floor(p*n/100) + 1` (1-based), clamped to n. P100 is the maximum.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
    let n = sorted.len();
    let rank = ((p * n as f64 / 100.0).floor() as usize + 1).min(n);
    sorted[rank - 1]
}

/// Linearly interpolated percentile over a sorted slice (position
/// `(n-1)*p/100` between order statistics).
pub fn percentile_linear(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
    let pos = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "mean of empty slice");
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by n).
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}
