//! Small statistics helpers shared by calibration and the experiment drivers.

use alloc::vec::Vec;

use crate::math;

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; NaN below two samples.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Half-width of the normal-approximation 95% interval of the mean.
pub fn mean_half_width(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    Z95 * math::sqrt(variance(xs) / xs.len() as f64)
}

/// Empirical `q`-quantile (lower order statistic). NaNs are ignored.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let q = q.clamp(0.0, 1.0);
    let idx = math::floor(q * (v.len() - 1) as f64) as usize;
    v[idx]
}

/// Largest threshold `t` with at most a `q` fraction of samples `<= t`.
///
/// Returns `None` when the samples are empty or the cut lands on `-inf`.
/// Ties at the cut move the threshold below the tied value, so a constant
/// sample yields a threshold under every sample.
pub fn lower_tail_threshold(xs: &[f64], q: f64) -> Option<f64> {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let allowed = math::floor(q.clamp(0.0, 1.0) * v.len() as f64) as usize;
    let cut = v[allowed.min(v.len() - 1)];
    if cut == f64::NEG_INFINITY {
        return None;
    }
    let below = v[..allowed.min(v.len())].iter().rev().find(|x| **x < cut).copied();
    Some(below.unwrap_or_else(|| next_down(cut)))
}

fn next_down(x: f64) -> f64 {
    if x == 0.0 {
        -f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    let (mx, my) = (mean(&xs[..n]), mean(&ys[..n]));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / math::sqrt(sxx * syy)
}

/// Wilson score interval for `successes` out of `trials` at 95%.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * math::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == trials { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// `Pr[X <= k]` for `X ~ Binomial(n, p)`.
pub fn binomial_cdf(k: u64, n: u64, p: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let (lp, lq) = (math::ln(p), math::ln(1.0 - p));
    let s: f64 = (0..=k)
        .map(|i| math::exp(ln_choose(n, i) + i as f64 * lp + (n - i) as f64 * lq))
        .sum();
    s.min(1.0)
}

/// Smallest per-trial success probability `p` for which fewer than `needed`
/// successes out of `n` happen with probability at most `target`.
pub fn min_success_probability(needed: u64, n: u64, target: f64) -> f64 {
    if needed == 0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if binomial_cdf(needed - 1, n, mid) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}
