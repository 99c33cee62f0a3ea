//! Exact laws and collision-count functionals of simple random walks.
//!
//! `collision_functional_pair(n, lambda)` is `E[(1 + lambda)^{#{1 <= i <= n : Y1_i = Y2_i}}]`
//! for two independent simple random walks from the origin. Its weight depends
//! on `Y1 - Y2` only, so it is computed by a dynamic program over the
//! difference walk, whose increments are `0` w.p. 1/2 and `+-2` w.p. 1/4.

use std::collections::HashMap;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::ensemble::map_replicas;
use crate::env::EnvSpec;
use crate::particles::{simulate_replica, EnvMode, RunConfig, SimError};
use crate::rng::{replica_rng, Stream};
use crate::stats::{pairwise_sum, pairwise_sum_by, Estimate};
use crate::testfn::TestFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WalkError {
    #[error("collision weights need lambda >= -1, got {0}")]
    BadLambda(f64),
    #[error("multi-walk functionals need 2 <= p <= 6 walks, got {0}")]
    WalkCount(usize),
    #[error("exact joint dynamic program would need more than {0} states")]
    StateSpace(usize),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
}

// ---- binomial pmf in saddle-point form (Loader 2000) ----

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln(n!) - [(n + 1/2) ln n - n + ln sqrt(2 pi)]`.
fn stirlerr(n: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15.0 {
        let mut ln_fact = 0.0;
        let mut k = 2.0;
        while k <= n {
            ln_fact += f64::ln(k);
            k += 1.0;
        }
        return ln_fact - ((n + 0.5) * n.ln() - n + LN_SQRT_2PI);
    }
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term `x ln(x / np) + np - x`, evaluated stably near `x = np`.
fn bd0(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let mut v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        let mut ej = 2.0 * x * v;
        v *= v;
        for j in 1..1000 {
            ej *= v;
            let s1 = s + ej / f64::from(2 * j + 1);
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        return s;
    }
    x * (x / np).ln() + np - x
}

fn binomial_half_pmf(n: u64, k: u64) -> f64 {
    let nf = n as f64;
    let half = 0.5 * nf;
    if k == 0 || k == n {
        return (-nf * std::f64::consts::LN_2).exp();
    }
    let kf = k as f64;
    let lc = stirlerr(nf) - stirlerr(kf) - stirlerr(nf - kf) - bd0(kf, half) - bd0(nf - kf, half);
    let lf = (2.0 * std::f64::consts::PI).ln() + kf.ln() + (-kf / nf).ln_1p();
    (lc - 0.5 * lf).exp()
}

/// `P(Y_n = x)` for a simple random walk from the origin.
pub fn srw_pmf(n: u64, x: i64) -> f64 {
    if x.unsigned_abs() > n || (n as i64 + x).rem_euclid(2) != 0 {
        return 0.0;
    }
    binomial_half_pmf(n, ((n as i64 + x) / 2) as u64)
}

/// `E[phi(Y_n / sqrt N)]`, the mean of `X^N_{n/N}(phi)` started from unit
/// mass at the origin.
pub fn mean_measure_exact(n_scale: u64, n: u64, phi: &TestFunction) -> f64 {
    let h = 1.0 / (n_scale as f64).sqrt();
    let sites: Vec<i64> = (0..=n).map(|k| 2 * k as i64 - n as i64).collect();
    pairwise_sum_by(&sites, &|&x| phi.eval(x as f64 * h) * srw_pmf(n, x))
}

fn check_lambda(lambda: f64) -> Result<(), WalkError> {
    if lambda.is_nan() || lambda < -1.0 {
        Err(WalkError::BadLambda(lambda))
    } else {
        Ok(())
    }
}

/// `E[(1 + lambda)^{#{1 <= i <= n : Y1_i = Y2_i}}]`, in O(n^2).
pub fn collision_functional_pair(n: u64, lambda: f64) -> Result<f64, WalkError> {
    check_lambda(lambda)?;
    let n = n as usize;
    // index j + n holds the weight of D = 2j
    let mut state = vec![0.0; 2 * n + 3];
    let mut next = state.clone();
    let origin = n + 1;
    state[origin] = 1.0;
    for i in 1..=n {
        let lo = origin - i;
        let hi = origin + i;
        for j in lo..=hi {
            next[j] = 0.5 * state[j] + 0.25 * (state[j - 1] + state[j + 1]);
        }
        next[origin] *= 1.0 + lambda;
        std::mem::swap(&mut state, &mut next);
    }
    Ok(pairwise_sum(&state))
}

/// Weighted joint law of `(Y1_n, Y2_n)` with weight `(1 + lambda)` on each
/// diagonal visit at times `1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointTable {
    n: u64,
    values: Vec<f64>,
}

impl EndpointTable {
    fn width(&self) -> usize {
        2 * self.n as usize + 1
    }

    pub fn get(&self, x: i64, y: i64) -> f64 {
        let n = self.n as i64;
        if x.abs() > n || y.abs() > n {
            return 0.0;
        }
        self.values[(x + n) as usize * self.width() + (y + n) as usize]
    }

    pub fn total(&self) -> f64 {
        pairwise_sum(&self.values)
    }

    pub fn horizon(&self) -> u64 {
        self.n
    }
}

/// Full endpoint-constrained table in O(n^3).
pub fn collision_endpoint_table(n: u64, lambda: f64) -> Result<EndpointTable, WalkError> {
    check_lambda(lambda)?;
    let w = 2 * n as usize + 1;
    let c = n as usize;
    let mut state = vec![0.0; w * w];
    let mut next = vec![0.0; w * w];
    state[c * w + c] = 1.0;
    for i in 1..=c {
        next.iter_mut().for_each(|v| *v = 0.0);
        let prev = i - 1;
        for a in (c - prev..=c + prev).step_by(2) {
            for b in (c - prev..=c + prev).step_by(2) {
                let v = state[a * w + b];
                if v == 0.0 {
                    continue;
                }
                let q = 0.25 * v;
                next[(a - 1) * w + b - 1] += q;
                next[(a - 1) * w + b + 1] += q;
                next[(a + 1) * w + b - 1] += q;
                next[(a + 1) * w + b + 1] += q;
            }
        }
        for a in 0..w {
            next[a * w + a] *= 1.0 + lambda;
        }
        std::mem::swap(&mut state, &mut next);
    }
    Ok(EndpointTable { n, values: state })
}

/// `E[(1 + lambda)^{#collisions}; Y1_n = x, Y2_n = y]`.
pub fn collision_functional_pair_endpoint(n: u64, lambda: f64, x: i64, y: i64) -> Result<f64, WalkError> {
    Ok(collision_endpoint_table(n, lambda)?.get(x, y))
}

/// Monte Carlo reference report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub query: String,
    pub exact: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub z: f64,
}

impl OracleReport {
    pub fn new(query: String, exact: f64, est: Estimate) -> Self {
        Self { query, exact, mc_mean: est.mean, mc_se: est.se, z: est.z_against(exact, 0.0) }
    }

    pub fn passed(&self, k: f64) -> bool {
        self.z.abs() <= k
    }
}

/// Pair-moment comparison for two tagged particles started at the origin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMomentReport {
    pub beta: f64,
    pub n_scale: u64,
    pub steps: u64,
    pub replicas: u64,
    pub lambda: f64,
    /// `collision_functional_pair(n, lambda)`: collisions counted at `1..=n`.
    pub oracle: OracleReport,
    /// `(1 + lambda) * collision_functional_pair(n - 1, lambda)`: collisions
    /// counted at the departure times `0..n`, where offspring laws are read.
    pub departure_oracle: OracleReport,
}

impl PairMomentReport {
    /// `|z| <= 4` against the `1..=n` functional.
    pub fn passed(&self) -> bool {
        self.oracle.passed(4.0)
    }
}

/// Exact `E[B1_n B2_n]` for two particles started together: the environment
/// is read at departure times `0..n`, and the first of those is a sure
/// collision.
pub fn pair_moment_exact(n: u64, lambda: f64) -> Result<f64, WalkError> {
    if n == 0 {
        return Ok(1.0);
    }
    Ok((1.0 + lambda) * collision_functional_pair(n - 1, lambda)?)
}

/// Samples `B1_n * B2_n` (descendant counts of two tagged particles started at
/// the origin, fresh environment per replica) and compares the mean with the
/// collision functionals.
pub fn pair_moment_mc_check(
    beta: f64,
    n_scale: u64,
    steps: u64,
    replicas: u64,
    seed: u64,
    workers: Option<usize>,
) -> Result<PairMomentReport, WalkError> {
    let env = EnvSpec::example(n_scale, beta, seed)?;
    let cfg = RunConfig {
        env,
        initial: vec![(0, 2)],
        horizon_steps: steps,
        replicas,
        mode: EnvMode::Annealed,
        seed,
        tagged: true,
    };
    let products: Vec<f64> = map_replicas(replicas, workers, |r| {
        let last = simulate_replica(&cfg, r, |_, _| {})?;
        let masses = last.tag_masses().unwrap_or_default();
        Ok(masses.iter().map(|&m| m as f64).product())
    })
    .into_iter()
    .collect::<Result<_, SimError>>()?;
    let est = Estimate::from_samples(&products);
    let lambda = beta * beta / (n_scale as f64).sqrt();
    let query = format!("E[B1 B2] beta={beta} N={n_scale} n={steps}");
    Ok(PairMomentReport {
        beta,
        n_scale,
        steps,
        replicas,
        lambda,
        oracle: OracleReport::new(query.clone(), collision_functional_pair(steps, lambda)?, est),
        departure_oracle: OracleReport::new(query, pair_moment_exact(steps, lambda)?, est),
    })
}

fn check_walk_count(p: usize) -> Result<(), WalkError> {
    if (2..=6).contains(&p) {
        Ok(())
    } else {
        Err(WalkError::WalkCount(p))
    }
}

fn any_pair_coincides(pos: &[i64]) -> bool {
    for a in 0..pos.len() {
        for b in a + 1..pos.len() {
            if pos[a] == pos[b] {
                return true;
            }
        }
    }
    false
}

/// One sample of `w^{#{1 <= i <= n : some pair of the p walks coincides at i}}`.
fn multiwalk_sample<R: Rng + ?Sized>(p: usize, n: u64, w: f64, rng: &mut R) -> f64 {
    let mut pos = [0i64; 6];
    let mut weight = 1.0;
    for _ in 0..n {
        let bits: u32 = rng.random();
        for (k, y) in pos.iter_mut().take(p).enumerate() {
            *y += if (bits >> k) & 1 == 1 { 1 } else { -1 };
        }
        if any_pair_coincides(&pos[..p]) {
            weight *= w;
        }
    }
    weight
}

/// Monte Carlo estimate of the p-walk collision functional.
pub fn multiwalk_collision_mc(
    p: usize,
    n: u64,
    w: f64,
    replicas: u64,
    seed: u64,
    workers: Option<usize>,
) -> Result<Estimate, WalkError> {
    check_walk_count(p)?;
    let samples = map_replicas(replicas, workers, |r| {
        let mut rng = replica_rng(seed, Stream::Walks, r);
        multiwalk_sample(p, n, w, &mut rng)
    });
    Ok(Estimate::from_samples(&samples))
}

/// Exact p-walk collision functional by a dynamic program over joint
/// positions. Intended for small `n`; refuses state spaces above two million.
pub fn multiwalk_collision_exact(p: usize, n: u64, w: f64) -> Result<f64, WalkError> {
    const MAX_STATES: usize = 2_000_000;
    check_walk_count(p)?;
    let states = (n as usize + 1).saturating_pow(p as u32);
    if states > MAX_STATES {
        return Err(WalkError::StateSpace(MAX_STATES));
    }
    let mut state: HashMap<Vec<i64>, f64> = HashMap::from([(vec![0; p], 1.0)]);
    for _ in 0..n {
        let mut next: HashMap<Vec<i64>, f64> = HashMap::with_capacity(state.len() * 2);
        for (pos, v) in &state {
            for bits in 0u32..(1 << p) {
                let moved: Vec<i64> =
                    pos.iter().enumerate().map(|(k, y)| y + if (bits >> k) & 1 == 1 { 1 } else { -1 }).collect();
                let weight = if any_pair_coincides(&moved) { w } else { 1.0 };
                *next.entry(moved).or_insert(0.0) += v * weight / f64::from(1u32 << p);
            }
        }
        state = next;
    }
    let mut values: Vec<(Vec<i64>, f64)> = state.into_iter().collect();
    values.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(pairwise_sum_by(&values, &|(_, v)| *v))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pascal-triangle law of Y_n (exact for moderate n: all values dyadic).
    fn pascal_row(n: usize) -> Vec<f64> {
        let mut row = vec![1.0];
        for _ in 0..n {
            let mut next = vec![0.0; row.len() + 1];
            for (k, v) in row.iter().enumerate() {
                next[k] += 0.5 * v;
                next[k + 1] += 0.5 * v;
            }
            row = next;
        }
        row
    }

    #[test]
    fn srw_pmf_small_values() {
        assert_eq!(srw_pmf(0, 0), 1.0);
        assert!((srw_pmf(2, 0) - 0.5).abs() < 1e-15);
        assert!((srw_pmf(2, 2) - 0.25).abs() < 1e-15);
        assert!((srw_pmf(2, -2) - 0.25).abs() < 1e-15);
        assert_eq!(srw_pmf(2, 1), 0.0);
        assert_eq!(srw_pmf(3, 5), 0.0);
    }

    #[test]
    fn srw_pmf_matches_pascal() {
        for n in [1usize, 5, 16, 17, 40, 100, 333] {
            let row = pascal_row(n);
            for (k, v) in row.iter().enumerate() {
                let x = 2 * k as i64 - n as i64;
                let got = srw_pmf(n as u64, x);
                assert!((got - v).abs() <= 1e-13 * v.max(1e-300), "n={n} x={x}: {got} vs {v}");
            }
        }
    }

    #[test]
    fn srw_pmf_normalised() {
        for n in [1u64, 10, 999, 1000, 1001, 5000, 10_000] {
            let masses: Vec<f64> = (0..=n).map(|k| srw_pmf(n, 2 * k as i64 - n as i64)).collect();
            assert!((pairwise_sum(&masses) - 1.0).abs() <= 1e-12, "n={n}");
        }
    }

    #[test]
    fn mean_measure_examples() {
        for (big_n, n) in [(16u64, 5u64), (100, 100), (64, 128)] {
            assert!((mean_measure_exact(big_n, n, &TestFunction::constant(1.0)) - 1.0).abs() < 1e-12);
            let var = mean_measure_exact(big_n, n, &TestFunction::square());
            assert!((var - n as f64 / big_n as f64).abs() < 1e-10);
            assert!(mean_measure_exact(big_n, n, &TestFunction::identity()).abs() < 1e-12);
        }
    }

    /// Brute force over all 4^n joint paths.
    fn pair_brute(n: u32, lambda: f64) -> f64 {
        let mut total = 0.0;
        for paths in 0u64..(1 << (2 * n)) {
            let (mut y1, mut y2, mut weight) = (0i64, 0i64, 1.0);
            for i in 0..n {
                y1 += if (paths >> (2 * i)) & 1 == 1 { 1 } else { -1 };
                y2 += if (paths >> (2 * i + 1)) & 1 == 1 { 1 } else { -1 };
                if y1 == y2 {
                    weight *= 1.0 + lambda;
                }
            }
            total += weight;
        }
        total / (1u64 << (2 * n)) as f64
    }

    #[test]
    fn pair_dp_examples() {
        for n in 0..20 {
            assert!((collision_functional_pair(n, 0.0).unwrap() - 1.0).abs() < 1e-14);
        }
        assert!((collision_functional_pair(1, 0.3).unwrap() - 1.15).abs() < 1e-15);
        assert!((collision_functional_pair(2, 0.1).unwrap() - 1.09).abs() < 1e-14);
        for n in 0..=8 {
            for lambda in [0.0, 0.1, 0.25, 1.0, -0.5] {
                let dp = collision_functional_pair(n, lambda).unwrap();
                assert!((dp - pair_brute(n as u32, lambda)).abs() < 1e-12, "n={n} lambda={lambda}");
            }
        }
        assert!(collision_functional_pair(3, -1.5).is_err());
    }

    #[test]
    fn pair_dp_monotone() {
        let mut prev_n = 0.0;
        for n in 0..60 {
            let v = collision_functional_pair(n, 0.2).unwrap();
            assert!(v >= prev_n);
            prev_n = v;
        }
        let mut prev_l = 0.0;
        for i in 0..30 {
            let v = collision_functional_pair(25, f64::from(i) * 0.05).unwrap();
            assert!(v >= prev_l);
            prev_l = v;
        }
    }

    #[test]
    fn endpoint_examples() {
        let t = collision_endpoint_table(1, 0.5).unwrap();
        assert!((t.get(1, 1) - 1.5 / 4.0).abs() < 1e-15);
        assert!((t.get(1, -1) - 0.25).abs() < 1e-15);
        for n in [0u64, 1, 4, 9, 16] {
            let free = collision_endpoint_table(n, 0.0).unwrap();
            for x in -(n as i64)..=n as i64 {
                for y in -(n as i64)..=n as i64 {
                    assert!((free.get(x, y) - srw_pmf(n, x) * srw_pmf(n, y)).abs() < 1e-15);
                }
            }
            for lambda in [0.1, 0.25, 2.0] {
                let t = collision_endpoint_table(n, lambda).unwrap();
                let total = collision_functional_pair(n, lambda).unwrap();
                assert!((t.total() - total).abs() <= 1e-10);
                assert!(t.values.iter().all(|&v| v <= total));
            }
        }
        assert!((collision_functional_pair_endpoint(1, 0.7, 1, 1).unwrap() - 1.7 / 4.0).abs() < 1e-15);
        assert_eq!(collision_functional_pair_endpoint(2, 0.7, 1, 1).unwrap(), 0.0);
    }

    /// Brute force over all 2^(p n) joint paths.
    fn multi_brute(p: usize, n: usize, w: f64) -> f64 {
        let total_bits = p * n;
        let mut total = 0.0;
        for paths in 0u64..(1 << total_bits) {
            let mut pos = vec![0i64; p];
            let mut weight = 1.0;
            for i in 0..n {
                for (k, y) in pos.iter_mut().enumerate() {
                    *y += if (paths >> (i * p + k)) & 1 == 1 { 1 } else { -1 };
                }
                if any_pair_coincides(&pos) {
                    weight *= w;
                }
            }
            total += weight;
        }
        total / (1u64 << total_bits) as f64
    }

    #[test]
    fn multiwalk_exact_matches_enumeration() {
        for (p, n) in [(2, 5), (3, 4), (4, 2), (4, 3), (5, 2)] {
            for w in [1.0, 1.05, 1.3] {
                let dp = multiwalk_collision_exact(p, n as u64, w).unwrap();
                assert!((dp - multi_brute(p, n, w)).abs() < 1e-12, "p={p} n={n} w={w}");
            }
        }
        // p = 2 reduces to the pair dynamic program
        let dp = multiwalk_collision_exact(2, 12, 1.25).unwrap();
        assert!((dp - collision_functional_pair(12, 0.25).unwrap()).abs() < 1e-12);
        assert!(multiwalk_collision_exact(7, 2, 1.0).is_err());
        assert!(multiwalk_collision_exact(1, 2, 1.0).is_err());
    }

    #[test]
    fn multiwalk_mc() {
        let e = multiwalk_collision_mc(3, 10, 1.0, 100, 1, None).unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.se, 0.0);
        let e = multiwalk_collision_mc(2, 16, 1.25, 100_000, 2, None).unwrap();
        let exact = collision_functional_pair(16, 0.25).unwrap();
        assert!(e.within(exact, 3.0, 0.0), "{e:?} vs {exact}");
        // four walks always share a site at odd times
        let e = multiwalk_collision_mc(4, 2, 1.05, 1000, 3, None).unwrap();
        assert!(e.within(multi_brute(4, 2, 1.05), 0.0, 1e-12));
        let e = multiwalk_collision_mc(3, 4, 1.3, 100_000, 3, None).unwrap();
        let exact = multi_brute(3, 4, 1.3);
        assert!(e.within(exact, 3.0, 0.0), "{e:?} vs {exact}");
    }

    #[test]
    fn pair_moment_at_time_zero() {
        let r = pair_moment_mc_check(1.0, 16, 0, 10, 1, None).unwrap();
        assert_eq!(r.oracle.exact, 1.0);
        assert_eq!(r.oracle.mc_mean, 1.0);
        assert_eq!(r.oracle.mc_se, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn pair_moment_without_environment() {
        let r = pair_moment_mc_check(0.0, 16, 8, 100_000, 4, None).unwrap();
        assert_eq!(r.oracle.exact, 1.0);
        assert_eq!(r.departure_oracle.exact, 1.0);
        assert!(r.oracle.z.abs() <= 3.0, "{r:?}");
    }

    #[test]
    fn pair_moment_one_step_is_second_moment_of_mean() {
        // E[V1 V2] = E[(1 + beta xi / N^{1/4})^2] = 1 + lambda
        assert_eq!(pair_moment_exact(1, 0.25).unwrap(), 1.25);
        let r = pair_moment_mc_check(1.0, 16, 1, 200_000, 5, None).unwrap();
        assert!(r.departure_oracle.z.abs() <= 3.0, "{r:?}");
    }
}
