//! Numerically stable scalar helpers shared across the crate.
//!
//! Everything probabilistic runs on log-weights; these helpers keep the
//! log-sum-exp plumbing in one place.

use rand::Rng;

/// `log(exp(a) + exp(b))` without intermediate overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// `log(sum_i exp(xs[i]))`; `-inf` for an empty slice or all-`-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Exponentiates log-weights into a probability vector.
///
/// Returns `None` when every weight is `-inf` (nothing to normalize).
pub fn normalize_log_weights(lw: &[f64]) -> Option<Vec<f64>> {
    let total = log_sum_exp(lw);
    if total == f64::NEG_INFINITY {
        return None;
    }
    Some(lw.iter().map(|w| (w - total).exp()).collect())
}

/// Log-density of `N(mu, sigma2)` at `y`.
pub fn log_normal_pdf(y: f64, mu: f64, sigma2: f64) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_6;
    let z = y - mu;
    -0.5 * (LN_2PI + sigma2.ln() + z * z / sigma2)
}

/// Inverse-CDF draw from a normalized probability vector.
///
/// Consumes exactly one uniform from the stream, so the draw sequence is
/// reproducible across platforms for a fixed RNG.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// splitmix64 step, used to derive independent seeds from (base, tag) pairs.
pub fn split_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(tag.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with divisor `n - 1`.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Population variance with divisor `n`.
pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile of an already sorted slice (type-7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn log_sum_exp_matches_naive_in_safe_range() {
        let xs = [0.5f64, 2.0, -1.0];
        let naive = xs.iter().copied().map(f64::exp).sum::<f64>().ln();
        assert_abs_diff_eq!(log_sum_exp(&xs), naive, epsilon = 1e-12);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        let xs = [-1e5, -1e5 + 2.0];
        let expected = -1e5 + 2.0 + (1.0f64 + (-2.0f64).exp()).ln();
        assert_abs_diff_eq!(log_sum_exp(&xs), expected, epsilon = 1e-9);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(
            log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn log_add_exp_agrees_with_slice_version() {
        for (a, b) in [(0.0, 0.0), (-3.0, 5.0), (700.0, 710.0)] {
            assert_abs_diff_eq!(log_add_exp(a, b), log_sum_exp(&[a, b]), epsilon = 1e-12);
        }
    }

    #[test]
    fn normal_pdf_standard_value() {
        // phi(0; 0, 1) = 1/sqrt(2 pi)
        assert_abs_diff_eq!(
            log_normal_pdf(0.0, 0.0, 1.0).exp(),
            0.3989422804014327,
            epsilon = 1e-15
        );
    }

    #[test]
    fn categorical_draw_is_inverse_cdf() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let probs = [0.0, 1.0, 0.0];
        for _ in 0..100 {
            assert_eq!(sample_categorical(&probs, &mut rng), 1);
        }
    }

    #[test]
    fn split_seed_distinguishes_tags() {
        assert_ne!(split_seed(42, 0), split_seed(42, 1));
        assert_eq!(split_seed(42, 3), split_seed(42, 3));
    }

    #[test]
    fn quantile_endpoints() {
        let v = [1.0, 2.0, 3.0, 10.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 10.0);
        assert_abs_diff_eq!(quantile_sorted(&v, 0.5), 2.5, epsilon = 1e-15);
    }
}
