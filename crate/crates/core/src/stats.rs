//! Ensemble reductions.
//!
//! Every sum over sites or replicas goes through [`pairwise_sum`], which keeps
//! rounding error at O(log n) ulps and makes the result independent of how
//! replicas were scheduled across workers (inputs are always ordered by
//! replica index before reduction).

use serde::{Deserialize, Serialize};

const PAIRWISE_BLOCK: usize = 32;

/// Pairwise (tree) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise sum of `f(item)` without allocating the mapped values for small
/// inputs.
pub fn pairwise_sum_by<T>(items: &[T], f: &impl Fn(&T) -> f64) -> f64 {
    if items.len() <= PAIRWISE_BLOCK {
        return items.iter().map(f).sum();
    }
    let mid = items.len() / 2;
    pairwise_sum_by(&items[..mid], f) + pairwise_sum_by(&items[mid..], f)
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { mean: value, se: 0.0, n: 0 }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, n };
        }
        if xs.iter().all(|&x| x == xs[0]) {
            return Self { mean: xs[0], se: 0.0, n };
        }
        let mean = pairwise_sum(xs) / n as f64;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = pairwise_sum(&dev) / (n as f64 - 1.0);
        Self { mean, se: (var / n as f64).sqrt(), n }
    }

    /// z-score of `self.mean` against a reference value carrying its own
    /// standard error.
    pub fn z_against(&self, reference: f64, reference_se: f64) -> f64 {
        let se = (self.se * self.se + reference_se * reference_se).sqrt();
        let diff = self.mean - reference;
        if se == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            }
        } else {
            diff / se
        }
    }

    /// `|mean - reference| <= k * se + slack`.
    pub fn within(&self, reference: f64, k: f64, slack: f64) -> bool {
        (self.mean - reference).abs() <= k * self.se + slack
    }
}

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mean = pairwise_sum(xs) / n as f64;
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    pairwise_sum(&dev) / (n as f64 - 1.0)
}

/// Sample variance together with an estimate of its standard error
/// `sqrt((m4 - s^4) / n)`.
pub fn variance_estimate(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let var = sample_variance(xs);
    if n < 2 {
        return Estimate { mean: var, se: 0.0, n };
    }
    let mean = pairwise_sum(xs) / n as f64;
    let fourth: Vec<f64> = xs.iter().map(|x| (x - mean).powi(4)).collect();
    let m4 = pairwise_sum(&fourth) / n as f64;
    Estimate { mean: var, se: ((m4 - var * var).max(0.0) / n as f64).sqrt(), n }
}

/// Sample covariance with the standard error of the mean of centred products.
pub fn covariance_estimate(xs: &[f64], ys: &[f64]) -> Estimate {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return Estimate { mean: 0.0, se: 0.0, n };
    }
    let mx = pairwise_sum(xs) / n as f64;
    let my = pairwise_sum(ys) / n as f64;
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let est = Estimate::from_samples(&prods);
    Estimate { mean: est.mean * n as f64 / (n as f64 - 1.0), se: est.se, n }
}
