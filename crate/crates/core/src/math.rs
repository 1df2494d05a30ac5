//! Log-space numerics shared by the engine.

use rand::{Rng, RngCore};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `log(sum(exp(xs)))` with max-shift. Empty or all `-inf` input gives `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `log(mean(exp(xs)))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    logsumexp(xs) - (xs.len() as f64).ln()
}

pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -LN_SQRT_2PI - sd.ln() - 0.5 * z * z
}

pub fn bernoulli_logpmf(x: i64, p: f64) -> f64 {
    match x {
        1 => p.ln(),
        0 => (1.0 - p).ln(),
        _ => f64::NEG_INFINITY,
    }
}

pub fn sample_bernoulli(p: f64, rng: &mut dyn RngCore) -> i64 {
    i64::from(rng.random::<f64>() < p)
}

/// Inverse-CDF draw from a probability vector. Trailing mass lost to
/// rounding is assigned to the last index with positive probability.
pub fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Draw an index with probability proportional to `exp(log_weights)`.
/// All `-inf` weights fall back to a uniform draw.
pub fn sample_log_categorical(log_weights: &[f64], rng: &mut dyn RngCore) -> usize {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return rng.random_range(0..log_weights.len());
    }
    let probs: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    sample_categorical(&probs, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logsumexp_edge_cases() {
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[-3.0]), -3.0);
        assert_eq!(logsumexp(&[1000.0, f64::NEG_INFINITY]), 1000.0);
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn normal_logpdf_at_mode() {
        assert!((normal_logpdf(0.0, 0.0, 1.0) + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn categorical_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = [0.2, 0.0, 0.8];
        let mut counts = [0usize; 3];
        for _ in 0..20_000 {
            counts[sample_categorical(&probs, &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[0] as f64 / 20_000.0 - 0.2).abs() < 0.015);
    }

    proptest! {
        #[test]
        fn logsumexp_matches_naive(xs in prop::collection::vec(-30.0f64..30.0, 1..20)) {
            let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
            prop_assert!((logsumexp(&xs) - naive).abs() < 1e-10);
        }
    }
}
