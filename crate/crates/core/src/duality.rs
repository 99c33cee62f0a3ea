//! Monte Carlo estimators for both sides of
//! `E[exp(-<X_t, phi>)] = E[exp(-<X_0, Y_t>)]`.
//!
//! The forward side comes either from the particle system (evaluated on the
//! atoms directly) or from the forward SPDE; the dual side from the dual SPDE
//! started at `Y_0 = phi`. The two sides use independent random streams.

use serde::Serialize;
use thiserror::Error;

use crate::ensemble::map_replicas;
use crate::measure::measure_apply;
use crate::particles::{simulate_replica, RunConfig, SimError};
use crate::rng::{replica_rng, Stream};
use crate::spde::{grid_pair, solve_dual, solve_forward, SpdeError, SpdeGrid, SpdeParams};
use crate::stats::{pairwise_sum_by, Estimate};
use crate::testfn::TestFunction;

/// Default absolute allowance for discretisation and finite-N bias.
pub const DEFAULT_DISCRETIZATION_BUDGET: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualityError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Spde(#[from] SpdeError),
    #[error("test function {0} must be nonnegative")]
    NegativePhi(String),
    #[error("time must be nonnegative, got {0}")]
    BadTime(f64),
}

/// Where the forward functional `<X_t, phi>` comes from.
#[derive(Debug, Clone)]
pub enum ForwardSource {
    /// The particle system; the horizon is `round(t N)` lattice steps.
    Particles(RunConfig),
    /// The forward SPDE from the given initial grid.
    Spde { initial: SpdeGrid, params: SpdeParams },
}

/// Initial measure `X_0` for the dual side.
#[derive(Debug, Clone)]
pub enum InitialMeasure {
    /// `sum_k mass_k delta_{pos_k}` as `(pos, mass)`.
    Atoms(Vec<(f64, f64)>),
    /// Absolutely continuous with the given density.
    Density(SpdeGrid),
}

impl InitialMeasure {
    /// `<X_0, y>` for a grid function `y`, interpolating `y` at atoms.
    pub fn pair_with(&self, y: &SpdeGrid) -> f64 {
        match self {
            InitialMeasure::Atoms(atoms) => pairwise_sum_by(atoms, &|&(x, m)| m * y.interpolate(x)),
            InitialMeasure::Density(u0) => {
                let idx: Vec<usize> = (0..y.cells()).collect();
                y.h() * pairwise_sum_by(&idx, &|&i| u0.interpolate(y.x_at(i)) * y.values()[i])
            }
        }
    }

    /// `<X_0, phi>`.
    pub fn pair_with_fn(&self, phi: &TestFunction) -> f64 {
        match self {
            InitialMeasure::Atoms(atoms) => pairwise_sum_by(atoms, &|&(x, m)| m * phi.eval(x)),
            InitialMeasure::Density(u0) => grid_pair(u0, phi),
        }
    }
}

fn check_phi(phi: &TestFunction, grid: Option<&SpdeGrid>) -> Result<(), DualityError> {
    let negative = match grid {
        Some(g) => (0..g.cells()).any(|i| phi.eval(g.x_at(i)) < 0.0),
        None => (-2000..=2000).any(|i| phi.eval(f64::from(i) * 0.01) < 0.0),
    };
    if negative {
        Err(DualityError::NegativePhi(phi.id().to_string()))
    } else {
        Ok(())
    }
}

/// Per-replica values of `exp(-<X_t, phi>)`.
pub fn forward_laplace_samples(
    source: &ForwardSource,
    phi: &TestFunction,
    t: f64,
    replicas: u64,
    workers: Option<usize>,
) -> Result<Vec<f64>, DualityError> {
    if !(t >= 0.0) {
        return Err(DualityError::BadTime(t));
    }
    match source {
        ForwardSource::Particles(cfg) => {
            check_phi(phi, None)?;
            let n_scale = cfg.env.scale_n();
            let mut cfg = cfg.clone();
            cfg.horizon_steps = (t * n_scale as f64).round() as u64;
            cfg.replicas = replicas;
            map_replicas(replicas, workers, |r| {
                let last = simulate_replica(&cfg, r, |_, _| {})?;
                Ok((-measure_apply(&last, n_scale, phi)).exp())
            })
            .into_iter()
            .collect()
        }
        ForwardSource::Spde { initial, params } => {
            check_phi(phi, Some(initial))?;
            params.validate()?;
            let params = SpdeParams { t_end: t, ..*params };
            map_replicas(replicas, workers, |r| {
                let mut rng = replica_rng(params.noise_seed, Stream::SpdeForward, r);
                let u = solve_forward(initial, &params, &mut rng)?;
                Ok((-grid_pair(&u, phi)).exp())
            })
            .into_iter()
            .collect()
        }
    }
}

pub fn estimate_forward_laplace(
    source: &ForwardSource,
    phi: &TestFunction,
    t: f64,
    replicas: u64,
    workers: Option<usize>,
) -> Result<Estimate, DualityError> {
    Ok(Estimate::from_samples(&forward_laplace_samples(source, phi, t, replicas, workers)?))
}

/// Per-replica values of `exp(-<X_0, Y_t>)`, `Y_0 = phi` on `template`.
pub fn dual_laplace_samples(
    x0: &InitialMeasure,
    phi: &TestFunction,
    template: &SpdeGrid,
    params: &SpdeParams,
    replicas: u64,
    workers: Option<usize>,
) -> Result<Vec<f64>, DualityError> {
    check_phi(phi, Some(template))?;
    params.validate()?;
    map_replicas(replicas, workers, |r| {
        let mut rng = replica_rng(params.noise_seed, Stream::SpdeDual, r);
        let y = solve_dual(template, phi, params, &mut rng)?;
        Ok((-x0.pair_with(&y)).exp())
    })
    .into_iter()
    .collect()
}

pub fn estimate_dual_laplace(
    x0: &InitialMeasure,
    phi: &TestFunction,
    template: &SpdeGrid,
    params: &SpdeParams,
    replicas: u64,
    workers: Option<usize>,
) -> Result<Estimate, DualityError> {
    Ok(Estimate::from_samples(&dual_laplace_samples(x0, phi, template, params, replicas, workers)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Statistical comparison of the two sides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub phi_id: String,
    pub lhs_mean: f64,
    pub lhs_se: f64,
    pub rhs_mean: f64,
    pub rhs_se: f64,
    pub z: f64,
    pub discretization_budget: f64,
    pub verdict: Verdict,
    pub lhs_replicas: usize,
    pub rhs_replicas: usize,
    /// Wall time; excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl DualityReport {
    /// Pass iff `|lhs - rhs| <= 3 sqrt(se_l^2 + se_r^2) + budget`.
    pub fn new(phi_id: impl Into<String>, lhs: Estimate, rhs: Estimate, budget: f64) -> Self {
        let se = (lhs.se * lhs.se + rhs.se * rhs.se).sqrt();
        let diff = lhs.mean - rhs.mean;
        let z = if se > 0.0 {
            diff / se
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        let verdict = if diff.abs() <= 3.0 * se + budget { Verdict::Pass } else { Verdict::Fail };
        Self {
            phi_id: phi_id.into(),
            lhs_mean: lhs.mean,
            lhs_se: lhs.se,
            rhs_mean: rhs.mean,
            rhs_se: rhs.se,
            z,
            discretization_budget: budget,
            verdict,
            lhs_replicas: lhs.n,
            rhs_replicas: rhs.n,
            runtime_secs: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}
