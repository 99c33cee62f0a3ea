//! Space-time random environment of offspring laws.
//!
//! The sign field `xi(n, x)` is never stored: it is recomputed from a
//! SplitMix64 hash of `(seed, n, x)`, which gives O(1) memory for any horizon
//! and lets every thread read the same environment without synchronisation.

use serde::Serialize;
use thiserror::Error;

use crate::rng::site_hash;

const PMF_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("scale N must be positive")]
    ZeroScale,
    #[error("beta must be finite and nonnegative, got {0}")]
    BadBeta(f64),
    #[error("beta = {beta} exceeds N^(1/4) = {limit} for N = {n}; offspring probabilities would leave [0, 1]")]
    BetaTooLarge { beta: f64, n: u64, limit: f64 },
    #[error("offspring law invalid: {0}")]
    BadLaw(String),
}

/// Finite offspring distribution `k -> p(k)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffspringLaw {
    pmf: Vec<(u64, f64)>,
}

impl OffspringLaw {
    pub fn new(mut pmf: Vec<(u64, f64)>) -> Result<Self, EnvError> {
        if pmf.is_empty() {
            return Err(EnvError::BadLaw("empty pmf".into()));
        }
        if let Some(&(k, p)) = pmf.iter().find(|(_, p)| !p.is_finite() || *p < 0.0) {
            return Err(EnvError::BadLaw(format!("p({k}) = {p} is not a probability")));
        }
        let total: f64 = pmf.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > PMF_TOLERANCE {
            return Err(EnvError::BadLaw(format!("probabilities sum to {total}")));
        }
        pmf.sort_by_key(|&(k, _)| k);
        for w in pmf.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(EnvError::BadLaw(format!("offspring count {} listed twice", w[0].0)));
            }
        }
        Ok(Self { pmf })
    }

    /// The critical binary law `{0, 2}` with `P(2) = p2`.
    pub(crate) fn binary(p2: f64) -> Self {
        Self { pmf: vec![(0, 1.0 - p2), (2, p2)] }
    }

    pub fn pmf(&self) -> &[(u64, f64)] {
        &self.pmf
    }

    pub fn prob(&self, k: u64) -> f64 {
        self.pmf.iter().find(|(j, _)| *j == k).map_or(0.0, |(_, p)| *p)
    }

    /// `sum_k k^p pmf(k)`.
    pub fn moment(&self, p: u32) -> f64 {
        self.pmf.iter().map(|&(k, q)| (k as f64).powi(p as i32) * q).sum()
    }

    /// Inverse-CDF draw from a uniform in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> u64 {
        let mut acc = 0.0;
        for &(k, p) in &self.pmf {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.pmf.last().map_or(0, |(k, _)| *k)
    }
}

/// `sum_k k^p law(k)`.
pub fn law_moment(law: &OffspringLaw, p: u32) -> f64 {
    law.moment(p)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LawKind {
    /// `q(0) = 1/2 - beta xi / (2 N^{1/4})`, `q(2) = 1/2 + beta xi / (2 N^{1/4})`.
    ExampleBernoulli,
    /// Explicit law for each value of the environment sign.
    CustomTable { plus: OffspringLaw, minus: OffspringLaw },
}

/// Immutable description of the environment field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvSpec {
    scale_n: u64,
    beta: f64,
    gamma_target: f64,
    seed: u64,
    law_kind: LawKind,
}

impl EnvSpec {
    pub fn example(scale_n: u64, beta: f64, seed: u64) -> Result<Self, EnvError> {
        Self::new(scale_n, beta, seed, LawKind::ExampleBernoulli)
    }

    pub fn new(scale_n: u64, beta: f64, seed: u64, law_kind: LawKind) -> Result<Self, EnvError> {
        if scale_n == 0 {
            return Err(EnvError::ZeroScale);
        }
        if !beta.is_finite() || beta < 0.0 {
            return Err(EnvError::BadBeta(beta));
        }
        let gamma_target = match &law_kind {
            LawKind::ExampleBernoulli => {
                let limit = (scale_n as f64).powf(0.25);
                if beta > limit {
                    return Err(EnvError::BetaTooLarge { beta, n: scale_n, limit });
                }
                1.0
            }
            LawKind::CustomTable { plus, minus } => 0.5 * (plus.moment(2) + minus.moment(2)) - 1.0,
        };
        Ok(Self { scale_n, beta, gamma_target, seed, law_kind })
    }

    pub fn scale_n(&self) -> u64 {
        self.scale_n
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma_target(&self) -> f64 {
        self.gamma_target
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn law_kind(&self) -> &LawKind {
        &self.law_kind
    }

    pub fn is_example(&self) -> bool {
        matches!(self.law_kind, LawKind::ExampleBernoulli)
    }

    /// Same law and parameters, different environment realisation.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// `beta / N^{1/4}`: the mean-offspring fluctuation `m - 1` when `xi = +1`.
    pub fn fluctuation(&self) -> f64 {
        self.beta / (self.scale_n as f64).powf(0.25)
    }

    /// Environment sign at lattice time `n`, site `x`.
    #[inline]
    pub fn sample_xi(&self, n: u64, x: i64) -> i8 {
        if site_hash(self.seed, n, x) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// `q(2)` of the Example law for a given sign.
    #[inline]
    pub fn branch_probability(&self, xi: i8) -> f64 {
        (0.5 + 0.5 * self.fluctuation() * f64::from(xi)).clamp(0.0, 1.0)
    }

    pub fn law_for_sign(&self, xi: i8) -> OffspringLaw {
        match &self.law_kind {
            LawKind::ExampleBernoulli => OffspringLaw::binary(self.branch_probability(xi)),
            LawKind::CustomTable { plus, minus } => {
                if xi > 0 {
                    plus.clone()
                } else {
                    minus.clone()
                }
            }
        }
    }

    pub fn offspring_pmf(&self, n: u64, x: i64) -> OffspringLaw {
        self.law_for_sign(self.sample_xi(n, x))
    }
}

/// One row of the environment moment audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub beta: f64,
    pub n: u64,
    /// `E[m^(1)]`
    pub mean_m1: f64,
    /// `E[m^(2) - 1]`, the branching variance gamma
    pub gamma_row: f64,
    /// `E[m^(4)]`
    pub mean_m4: f64,
    /// `N^{1/2} E[(m^(1) - 1)^2]`, should equal beta^2
    pub beta2_row: f64,
    /// `N^{1/2} E[(m^(1) - 1)^4]`
    pub fourth_row: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub rows: Vec<AuditRow>,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Exact environment moments of `env`, averaging over the two equiprobable
/// signs.
pub fn audit_env(env: &EnvSpec) -> AuditRow {
    let laws = [env.law_for_sign(1), env.law_for_sign(-1)];
    let avg = |f: &dyn Fn(&OffspringLaw) -> f64| 0.5 * (f(&laws[0]) + f(&laws[1]));
    let root_n = (env.scale_n as f64).sqrt();
    AuditRow {
        beta: env.beta,
        n: env.scale_n,
        mean_m1: avg(&|l| l.moment(1)),
        gamma_row: avg(&|l| l.moment(2) - 1.0),
        mean_m4: avg(&|l| l.moment(4)),
        beta2_row: root_n * avg(&|l| (l.moment(1) - 1.0).powi(2)),
        fourth_row: root_n * avg(&|l| (l.moment(1) - 1.0).powi(4)),
        exact: true,
    }
}

/// Audits the Example law for every `(beta, N)` pair.
pub fn audit_assumption_a(betas: &[f64], ns: &[u64]) -> Result<AuditReport, EnvError> {
    const TOL: f64 = 1e-12;
    let mut rows = Vec::with_capacity(betas.len() * ns.len());
    let mut violations = Vec::new();
    for &beta in betas {
        for &n in ns {
            let env = EnvSpec::example(n, beta, 0)?;
            let row = audit_env(&env);
            if (row.mean_m1 - 1.0).abs() > TOL {
                violations.push(format!("beta={beta} N={n}: E[m1] = {} != 1", row.mean_m1));
            }
            if (row.gamma_row - 1.0).abs() > TOL {
                violations.push(format!("beta={beta} N={n}: E[m2 - 1] = {} != 1", row.gamma_row));
            }
            if (row.beta2_row - beta * beta).abs() > TOL * (1.0 + beta * beta) {
                violations.push(format!(
                    "beta={beta} N={n}: sqrt(N) E[(m1 - 1)^2] = {} != beta^2 = {}",
                    row.beta2_row,
                    beta * beta
                ));
            }
            rows.push(row);
        }
    }
    Ok(AuditReport { rows, violations })
}
