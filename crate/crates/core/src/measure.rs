//! Scaled measure-valued process `X^N_t = (1/N) sum_x B_{tN,x} delta_{x/sqrt N}`
//! and its exact martingale decomposition.
//!
//! Per step, `X_{n+1}(phi) - X_n(phi) = dMb + dMe + dMs + dC` where `dMb` is the
//! branching noise given the environment, `dMe` the environment noise, `dMs`
//! the spatial (movement) noise and `dC = (1/N) X_n(A^N phi)` the drift.
//! Brackets are the exact conditional second moments at finite `N`.

use std::io::{self, Write};

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::particles::{ParticleField, StepRecord};
use crate::stats::pairwise_sum_by;
use crate::testfn::TestFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObsError {
    #[error("martingale increments need the binary Example law (record from step {0} is not)")]
    NotExampleLaw(u64),
    #[error("heat kernel time must be positive, got {0}")]
    NonPositiveTime(f64),
}

/// `X^N(phi) = (1/N) sum_x B_x phi(x / sqrt N)`.
pub fn measure_apply(field: &ParticleField, n_scale: u64, phi: &TestFunction) -> f64 {
    let n = n_scale as f64;
    let h = 1.0 / n.sqrt();
    pairwise_sum_by(field.counts(), &|&(x, c)| c as f64 * phi.eval(x as f64 * h)) / n
}

/// `A^N phi(x) = N [phi(x + N^{-1/2}) + phi(x - N^{-1/2}) - 2 phi(x)] / 2`.
pub fn discrete_generator(phi: &TestFunction, n_scale: u64, x: f64) -> f64 {
    let n = n_scale as f64;
    let h = 1.0 / n.sqrt();
    n * (phi.eval(x + h) + phi.eval(x - h) - 2.0 * phi.eval(x)) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Increments {
    pub mb: f64,
    pub me: f64,
    pub ms: f64,
    pub c: f64,
}

impl Increments {
    pub fn total(&self) -> f64 {
        self.mb + self.me + self.ms + self.c
    }

    fn abs_scale(&self) -> f64 {
        self.mb.abs() + self.me.abs() + self.ms.abs() + self.c.abs()
    }
}

/// Martingale and drift increments of one recorded transition.
pub fn martingale_increments(
    rec: &StepRecord,
    phi: &TestFunction,
    n_scale: u64,
    beta: f64,
) -> Result<Increments, ObsError> {
    if !rec.example_law {
        return Err(ObsError::NotExampleLaw(rec.step_n));
    }
    let n = n_scale as f64;
    let h = 1.0 / n.sqrt();
    let fluct = beta / n.powf(0.25);
    // (left value, right value, centre value) of phi around each source
    let vals: Vec<(f64, f64, f64)> = rec
        .entries
        .iter()
        .map(|e| {
            let x = e.site as f64;
            (phi.eval((x - 1.0) * h), phi.eval((x + 1.0) * h), phi.eval(x * h))
        })
        .collect();
    let idx: Vec<usize> = (0..rec.entries.len()).collect();
    let sum = |f: &dyn Fn(usize) -> f64| pairwise_sum_by(&idx, &|&i| f(i)) / n;
    let mb = sum(&|i| {
        let e = &rec.entries[i];
        let (l, r, _) = vals[i];
        let m = 1.0 + fluct * f64::from(e.xi);
        (e.children_left as f64 - e.parents_left as f64 * m) * l
            + (e.children_right as f64 - e.parents_right as f64 * m) * r
    });
    let me = sum(&|i| {
        let e = &rec.entries[i];
        let (l, r, _) = vals[i];
        fluct * f64::from(e.xi) * (e.parents_left as f64 * l + e.parents_right as f64 * r)
    });
    let ms = sum(&|i| {
        let e = &rec.entries[i];
        let (l, r, _) = vals[i];
        e.parents_left as f64 * l + e.parents_right as f64 * r - e.count as f64 * (l + r) / 2.0
    });
    let c = sum(&|i| {
        let (l, r, c0) = vals[i];
        rec.entries[i].count as f64 * (l + r - 2.0 * c0) / 2.0
    });
    Ok(Increments { mb, me, ms, c })
}

/// Exact predictable bracket increments `(d<Mb>, d<Me>)` given the field
/// before the step.
pub fn bracket_increments(field: &ParticleField, phi: &TestFunction, n_scale: u64, beta: f64) -> (f64, f64) {
    let n = n_scale as f64;
    let h = 1.0 / n.sqrt();
    let moments = |x: i64| {
        let l = phi.eval((x as f64 - 1.0) * h);
        let r = phi.eval((x as f64 + 1.0) * h);
        ((l + r) / 2.0, (l * l + r * r) / 2.0)
    };
    let sum_b = pairwise_sum_by(field.counts(), &|&(x, c)| c as f64 * moments(x).1);
    let sum_e = pairwise_sum_by(field.counts(), &|&(x, c)| {
        let (mu1, mu2) = moments(x);
        let b = c as f64;
        b * (b - 1.0) * mu1 * mu1 + b * mu2
    });
    let db = (1.0 - beta * beta / n.sqrt()) / (n * n) * sum_b;
    let de = beta * beta / n.powf(2.5) * sum_e;
    (db, de)
}

/// Running martingale decomposition of `X_t(phi)` for one replica.
#[derive(Debug, Clone)]
pub struct MartingaleLedger {
    pub phi: TestFunction,
    pub n_scale: u64,
    pub beta: f64,
    pub mb: f64,
    pub me: f64,
    pub ms: f64,
    pub c: f64,
    pub bracket_b: f64,
    pub bracket_e: f64,
    pub qv_b: f64,
    pub qv_e: f64,
    pub steps: u64,
    pub x0: f64,
    pub x_phi: f64,
    /// Largest relative residual of the decomposition seen so far.
    pub max_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LedgerRow {
    pub step: u64,
    pub mb: f64,
    pub me: f64,
    pub ms: f64,
    pub c: f64,
    pub bracket_b: f64,
    pub bracket_e: f64,
    pub x_phi: f64,
}

pub const LEDGER_HEADER: &str = "replica,step,Mb,Me,Ms,C,bracket_b,bracket_e,X_phi";

impl MartingaleLedger {
    pub fn new(phi: TestFunction, n_scale: u64, beta: f64, initial: &ParticleField) -> Self {
        let x0 = measure_apply(initial, n_scale, &phi);
        Self {
            phi,
            n_scale,
            beta,
            mb: 0.0,
            me: 0.0,
            ms: 0.0,
            c: 0.0,
            bracket_b: 0.0,
            bracket_e: 0.0,
            qv_b: 0.0,
            qv_e: 0.0,
            steps: 0,
            x0,
            x_phi: x0,
            max_residual: 0.0,
        }
    }

    /// Folds in one transition and returns the relative residual
    /// `|dX - (dMb + dMe + dMs + dC)| / scale` for this step.
    pub fn update(&mut self, before: &ParticleField, rec: &StepRecord, after: &ParticleField) -> Result<f64, ObsError> {
        let inc = martingale_increments(rec, &self.phi, self.n_scale, self.beta)?;
        let (db, de) = bracket_increments(before, &self.phi, self.n_scale, self.beta);
        let x_before = measure_apply(before, self.n_scale, &self.phi);
        let x_after = measure_apply(after, self.n_scale, &self.phi);
        let dx = x_after - x_before;
        let scale = x_before.abs() + x_after.abs() + inc.abs_scale();
        let residual = if scale > 0.0 { (dx - inc.total()).abs() / scale } else { 0.0 };
        self.mb += inc.mb;
        self.me += inc.me;
        self.ms += inc.ms;
        self.c += inc.c;
        self.bracket_b += db;
        self.bracket_e += de;
        self.qv_b += inc.mb * inc.mb;
        self.qv_e += inc.me * inc.me;
        self.steps += 1;
        self.x_phi = x_after;
        self.max_residual = self.max_residual.max(residual);
        Ok(residual)
    }

    /// Cumulative form of the decomposition: relative gap between
    /// `X_t - X_0` and `Mb + Me + Ms + C`.
    pub fn cumulative_residual(&self) -> f64 {
        let lhs = self.x_phi - self.x0;
        let rhs = self.mb + self.me + self.ms + self.c;
        let scale = self.x_phi.abs() + self.x0.abs() + self.mb.abs() + self.me.abs() + self.ms.abs() + self.c.abs();
        if scale > 0.0 {
            (lhs - rhs).abs() / scale
        } else {
            0.0
        }
    }

    pub fn row(&self) -> LedgerRow {
        LedgerRow {
            step: self.steps,
            mb: self.mb,
            me: self.me,
            ms: self.ms,
            c: self.c,
            bracket_b: self.bracket_b,
            bracket_e: self.bracket_e,
            x_phi: self.x_phi,
        }
    }
}

pub fn write_ledger_row<W: Write>(w: &mut W, replica: u64, row: &LedgerRow) -> io::Result<()> {
    writeln!(
        w,
        "{replica},{},{},{},{},{},{},{},{}",
        row.step, row.mb, row.me, row.ms, row.c, row.bracket_b, row.bracket_e, row.x_phi
    )
}

/// Piecewise-constant density `u^N(t, y) = B_x / (2 sqrt N)` on cells of width
/// `2 / sqrt N` centred at `x / sqrt N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityField {
    pub step_n: u64,
    pub n_scale: u64,
    pub values: Vec<(i64, f64)>,
}

impl DensityField {
    pub fn cell_width(&self) -> f64 {
        2.0 / (self.n_scale as f64).sqrt()
    }

    pub fn cell_center(&self, site: i64) -> f64 {
        site as f64 / (self.n_scale as f64).sqrt()
    }

    pub fn integral(&self) -> f64 {
        self.cell_width() * pairwise_sum_by(&self.values, &|&(_, u)| u)
    }

    /// Height at `y`; zero outside occupied cells.
    pub fn at(&self, y: f64) -> f64 {
        let half = self.cell_width() / 2.0;
        self.values
            .iter()
            .find(|&&(x, _)| (y - self.cell_center(x)).abs() < half)
            .map_or(0.0, |&(_, u)| u)
    }
}

pub fn density(field: &ParticleField, n_scale: u64) -> DensityField {
    let denom = 2.0 * (n_scale as f64).sqrt();
    DensityField {
        step_n: field.step_n,
        n_scale,
        values: field.counts().iter().map(|&(x, c)| (x, c as f64 / denom)).collect(),
    }
}

/// Heat kernel `psi^x_t(y) = exp(-(y - x)^2 / 2t) / sqrt(2 pi t)`.
pub fn gaussian_kernel(x: f64, t: f64, y: f64) -> Result<f64, ObsError> {
    if !(t > 0.0) {
        return Err(ObsError::NonPositiveTime(t));
    }
    Ok(heat_kernel(x, t, y))
}

#[inline]
pub(crate) fn heat_kernel(x: f64, t: f64, y: f64) -> f64 {
    (-(y - x) * (y - x) / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt()
}

/// Both sides of
/// `|psi^x_{t+eps}(y) - psi^x_t(y)|^p <= (eps t^{-3/2})^delta (psi^x_{t+eps}(y)^{p-delta} + psi^x_t(y)^{p-delta})`.
pub fn kernel_inequality_sides(x: f64, y: f64, t: f64, eps: f64, p: f64, delta: f64) -> (f64, f64) {
    let a = heat_kernel(x, t + eps, y);
    let b = heat_kernel(x, t, y);
    let lhs = (a - b).abs().powf(p);
    let rhs = (eps * t.powf(-1.5)).powf(delta) * (a.powf(p - delta) + b.powf(p - delta));
    (lhs, rhs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelCheck {
    pub samples: usize,
    pub violations: usize,
    /// Largest `lhs - rhs` seen (negative when the bound always held).
    pub worst_gap: f64,
}

/// Random search for violations of the heat-kernel increment bound over
/// `t in [0.05, 5]`, `eps in [0, 1]`, `p in [0.5, 4]`, `delta in [0, p]`,
/// `|x|, |y| <= 5`.
pub fn kernel_inequality_check<R: Rng + ?Sized>(samples: usize, rng: &mut R) -> KernelCheck {
    const SLACK: f64 = 1e-12;
    let mut violations = 0;
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..samples {
        let t = rng.random_range(0.05..=5.0);
        let eps = rng.random_range(0.0..=1.0);
        let p = rng.random_range(0.5..=4.0);
        let delta = rng.random_range(0.0..=p);
        let x = rng.random_range(-5.0..=5.0);
        let y = rng.random_range(-5.0..=5.0);
        let (lhs, rhs) = kernel_inequality_sides(x, y, t, eps, p, delta);
        worst_gap = worst_gap.max(lhs - rhs);
        if lhs > rhs + SLACK {
            violations += 1;
        }
    }
    KernelCheck { samples, violations, worst_gap }
}
