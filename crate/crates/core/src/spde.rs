//! Explicit finite-difference Euler-Maruyama schemes on a truncated interval.
//!
//! Forward equation: `du = 1/2 u'' dt + sqrt(gamma u + 2 beta^2 u^2) dW`.
//! Dual equation:    `dY = (1/2 Y'' - gamma/2 Y^2) dt + sqrt(2) beta Y dW`.
//! With `beta = 0` the dual is the deterministic log-Laplace equation.
//!
//! Space-time white noise is discretised per cell as `g * sqrt(tau / h)` with
//! `g` standard normal. Values are cell-centred and clipped at zero after
//! every step; `tau <= h^2 / 2` is enforced when a grid is built.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{replica_rng, Stream};
use crate::stats::pairwise_sum_by;
use crate::testfn::TestFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpdeError {
    #[error("time step tau = {tau} violates the stability bound tau <= h^2/2 = {limit}")]
    Unstable { tau: f64, limit: f64 },
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("non-finite value {value} in cell {cell} after step {step}")]
    NonFinite { step: u64, cell: usize, value: f64 },
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Zero flux: ghost cells mirror the boundary cell.
    #[default]
    Neumann,
    /// Ghost cells hold zero.
    Dirichlet0,
}

/// Nonnegative cell-centred values on `[x_min, x_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdeGrid {
    x_min: f64,
    x_max: f64,
    h: f64,
    tau: f64,
    boundary: Boundary,
    values: Vec<f64>,
    steps_taken: u64,
}

impl SpdeGrid {
    pub fn new(x_min: f64, x_max: f64, h: f64, tau: f64, boundary: Boundary) -> Result<Self, SpdeError> {
        if !(x_min.is_finite() && x_max.is_finite() && x_max > x_min) {
            return Err(SpdeError::BadGrid(format!("need x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(SpdeError::BadGrid(format!("h must be positive, got {h}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(SpdeError::BadGrid(format!("tau must be positive, got {tau}")));
        }
        let limit = h * h / 2.0;
        if tau > limit * (1.0 + 1e-12) {
            return Err(SpdeError::Unstable { tau, limit });
        }
        let len = x_max - x_min;
        let cells = (len / h).round();
        if cells < 1.0 || (cells * h - len).abs() > 1e-9 * len {
            return Err(SpdeError::BadGrid(format!("h = {h} does not divide the domain length {len}")));
        }
        Ok(Self { x_min, x_max, h, tau, boundary, values: vec![0.0; cells as usize], steps_taken: 0 })
    }

    /// Grid with `values[i] = f(x_i)`, clipped at zero.
    pub fn with_profile(mut self, f: impl Fn(f64) -> f64) -> Self {
        for i in 0..self.values.len() {
            self.values[i] = f(self.x_at(i)).max(0.0);
        }
        self
    }

    /// Replaces the cell values; they must be finite and nonnegative.
    pub fn with_values(mut self, values: &[f64]) -> Result<Self, SpdeError> {
        if values.len() != self.values.len() {
            return Err(SpdeError::BadGrid(format!("expected {} values, got {}", self.values.len(), values.len())));
        }
        if let Some((cell, &value)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(SpdeError::BadGrid(format!("cell {cell} holds {value}; values must be finite and >= 0")));
        }
        self.values.copy_from_slice(values);
        Ok(self)
    }

    pub fn sample(mut self, phi: &TestFunction) -> Self {
        for i in 0..self.values.len() {
            self.values[i] = phi.eval(self.x_at(i)).max(0.0);
        }
        self
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn x_at(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.h
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// Same geometry with a different time step.
    pub fn with_tau(&self, tau: f64) -> Result<Self, SpdeError> {
        let mut g = Self::new(self.x_min, self.x_max, self.h, tau, self.boundary)?;
        g.values.clone_from(&self.values);
        Ok(g)
    }

    /// `h * sum_i values_i`.
    pub fn mass(&self) -> f64 {
        self.h * pairwise_sum_by(&self.values, &|&v| v)
    }

    /// Linear interpolation between cell centres; constant beyond the outer
    /// centres.
    pub fn interpolate(&self, x: f64) -> f64 {
        let n = self.values.len();
        let s = (x - self.x_min) / self.h - 0.5;
        if s <= 0.0 {
            return if x < self.x_min && self.boundary == Boundary::Dirichlet0 { 0.0 } else { self.values[0] };
        }
        if s >= (n - 1) as f64 {
            return if x > self.x_max && self.boundary == Boundary::Dirichlet0 { 0.0 } else { self.values[n - 1] };
        }
        let i = s.floor() as usize;
        let frac = s - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    fn ghosts(&self) -> (f64, f64) {
        match self.boundary {
            Boundary::Neumann => (self.values[0], self.values[self.values.len() - 1]),
            Boundary::Dirichlet0 => (0.0, 0.0),
        }
    }

    /// One explicit step: `v_i <- max(v_i + (tau / 2h^2) lap_i + update(v_i), 0)`.
    fn advance(&mut self, mut update: impl FnMut(f64) -> f64) -> Result<(), SpdeError> {
        let (left, right) = self.ghosts();
        let k = self.tau / (2.0 * self.h * self.h);
        let n = self.values.len();
        let mut prev = left;
        for i in 0..n {
            let cur = self.values[i];
            let next = if i + 1 < n { self.values[i + 1] } else { right };
            let v = cur + k * (next - 2.0 * cur + prev) + update(cur);
            if !v.is_finite() {
                return Err(SpdeError::NonFinite { step: self.steps_taken, cell: i, value: v });
            }
            self.values[i] = v.max(0.0);
            prev = cur;
        }
        self.steps_taken += 1;
        Ok(())
    }
}

/// Coefficients of the forward and dual equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpdeParams {
    pub gamma: f64,
    pub beta: f64,
    pub t_end: f64,
    pub noise_seed: u64,
    /// Multiplicative noise coefficient of the dual; `sqrt(2) * beta` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_noise: Option<f64>,
}

impl SpdeParams {
    pub fn new(gamma: f64, beta: f64, t_end: f64, noise_seed: u64) -> Result<Self, SpdeError> {
        let p = Self { gamma, beta, t_end, noise_seed, dual_noise: None };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SpdeError> {
        for (name, v) in [("gamma", self.gamma), ("beta", self.beta), ("t_end", self.t_end)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SpdeError::BadParam(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if let Some(s) = self.dual_noise {
            if !(s.is_finite() && s >= 0.0) {
                return Err(SpdeError::BadParam(format!("dual_noise must be nonnegative, got {s}")));
            }
        }
        Ok(())
    }

    pub fn dual_noise_coefficient(&self) -> f64 {
        self.dual_noise.unwrap_or(std::f64::consts::SQRT_2 * self.beta)
    }
}

/// Number of steps to reach `t_end` and the (possibly shortened) step size.
pub fn steps_for(t_end: f64, tau: f64) -> (u64, f64) {
    if t_end <= 0.0 {
        return (0, tau);
    }
    let steps = (t_end / tau * (1.0 - 1e-12)).ceil().max(1.0);
    (steps as u64, t_end / steps)
}

/// `u <- u + 1/2 lap u tau + sqrt(gamma u + 2 beta^2 u^2) sqrt(tau / h) g`.
pub fn em_step_forward<R: Rng + ?Sized>(grid: &mut SpdeGrid, params: &SpdeParams, rng: &mut R) -> Result<(), SpdeError> {
    let scale = (grid.tau / grid.h).sqrt();
    let (gamma, two_beta2) = (params.gamma, 2.0 * params.beta * params.beta);
    grid.advance(|u| {
        let var = gamma * u + two_beta2 * u * u;
        if var > 0.0 {
            let g: f64 = rng.sample(StandardNormal);
            var.sqrt() * scale * g
        } else {
            0.0
        }
    })
}

/// `Y <- Y + 1/2 lap Y tau - gamma/2 Y^2 tau + sigma Y sqrt(tau / h) g`.
pub fn em_step_dual<R: Rng + ?Sized>(grid: &mut SpdeGrid, params: &SpdeParams, rng: &mut R) -> Result<(), SpdeError> {
    let tau = grid.tau;
    let scale = (grid.tau / grid.h).sqrt();
    let sigma = params.dual_noise_coefficient();
    let half_gamma = 0.5 * params.gamma;
    grid.advance(|y| {
        let drift = -half_gamma * y * y * tau;
        if sigma > 0.0 && y > 0.0 {
            let g: f64 = rng.sample(StandardNormal);
            drift + sigma * y * scale * g
        } else {
            drift
        }
    })
}

/// Forward solution at `params.t_end`.
pub fn solve_forward<R: Rng + ?Sized>(initial: &SpdeGrid, params: &SpdeParams, rng: &mut R) -> Result<SpdeGrid, SpdeError> {
    let (steps, tau) = steps_for(params.t_end, initial.tau);
    let mut grid = initial.with_tau(tau)?;
    for _ in 0..steps {
        em_step_forward(&mut grid, params, rng)?;
    }
    Ok(grid)
}

/// Dual solution at `params.t_end` from `Y_0 = phi` sampled on the grid.
pub fn solve_dual<R: Rng + ?Sized>(
    template: &SpdeGrid,
    phi: &TestFunction,
    params: &SpdeParams,
    rng: &mut R,
) -> Result<SpdeGrid, SpdeError> {
    let (steps, tau) = steps_for(params.t_end, template.tau);
    let mut grid = template.with_tau(tau)?.sample(phi);
    for _ in 0..steps {
        em_step_dual(&mut grid, params, rng)?;
    }
    Ok(grid)
}

/// Deterministic log-Laplace equation `v' = 1/2 v'' - gamma/2 v^2`, `v_0 = phi`.
pub fn deterministic_log_laplace(
    phi: &TestFunction,
    gamma: f64,
    template: &SpdeGrid,
    t_end: f64,
) -> Result<SpdeGrid, SpdeError> {
    let params = SpdeParams { gamma, beta: 0.0, t_end, noise_seed: 0, dual_noise: Some(0.0) };
    params.validate()?;
    // no noise is ever drawn with a zero coefficient
    let mut rng = replica_rng(0, Stream::SpdeDual, 0);
    solve_dual(template, phi, &params, &mut rng)
}

/// `<nu, phi> = h sum_i phi(x_i) values_i`.
pub fn grid_pair(grid: &SpdeGrid, phi: &TestFunction) -> f64 {
    let idx: Vec<usize> = (0..grid.cells()).collect();
    grid.h * pairwise_sum_by(&idx, &|&i| phi.eval(grid.x_at(i)) * grid.values[i])
}

pub const GRID_HEADER: &str = "replica,t,x,u";

pub fn write_grid_rows<W: Write>(w: &mut W, replica: u64, t: f64, grid: &SpdeGrid) -> io::Result<()> {
    for (i, u) in grid.values.iter().enumerate() {
        writeln!(w, "{replica},{t},{},{u}", grid.x_at(i))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::map_replicas;
    use crate::measure::heat_kernel;
    use crate::stats::Estimate;

    fn grid(h: f64, tau: f64) -> SpdeGrid {
        SpdeGrid::new(-10.0, 10.0, h, tau, Boundary::Neumann).unwrap()
    }

    #[test]
    fn construction_rules() {
        assert!(matches!(SpdeGrid::new(-1.0, 1.0, 0.1, 0.01, Boundary::Neumann), Err(SpdeError::Unstable { .. })));
        assert!(SpdeGrid::new(-1.0, 1.0, 0.1, 0.005, Boundary::Neumann).is_ok());
        assert!(SpdeGrid::new(-1.0, 1.0, 0.3, 0.005, Boundary::Neumann).is_err());
        assert!(SpdeGrid::new(1.0, -1.0, 0.1, 0.005, Boundary::Neumann).is_err());
        let g = grid(0.05, 0.00125);
        assert_eq!(g.cells(), 400);
        assert!((g.x_at(0) + 9.975).abs() < 1e-12);
    }

    #[test]
    fn heat_mode_matches_kernel() {
        let h = 0.05;
        let s0 = 0.1;
        let g0 = grid(h, h * h / 2.0).with_profile(|x| heat_kernel(0.0, s0, x));
        let params = SpdeParams::new(0.0, 0.0, 0.1, 1).unwrap();
        let mut rng = replica_rng(0, Stream::SpdeForward, 0);
        let g = solve_forward(&g0, &params, &mut rng).unwrap();
        let peak = heat_kernel(0.0, s0 + 0.1, 0.0);
        let err = (0..g.cells()).map(|i| (g.values()[i] - heat_kernel(0.0, s0 + 0.1, g.x_at(i))).abs()).fold(0.0, f64::max);
        assert!(err / peak <= 0.01, "relative sup error {}", err / peak);
    }

    #[test]
    fn zero_is_absorbing() {
        let params = SpdeParams::new(1.0, 1.0, 0.05, 1).unwrap();
        let mut rng = replica_rng(0, Stream::SpdeForward, 0);
        let g = solve_forward(&grid(0.05, 0.001), &params, &mut rng).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        let g = solve_dual(&grid(0.05, 0.001), &TestFunction::zero(), &params, &mut rng).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dual_ode_for_flat_data() {
        let c = 2.0;
        let template = SpdeGrid::new(-2.0, 2.0, 0.05, 1e-4, Boundary::Neumann).unwrap();
        let v = deterministic_log_laplace(&TestFunction::constant(c), 1.0, &template, 1.0).unwrap();
        let exact = c / (1.0 + c * 1.0 / 2.0);
        for &y in v.values() {
            assert!((y - exact).abs() / exact <= 0.01);
        }
        assert_eq!(v.steps_taken(), 10_000);
    }

    #[test]
    fn deterministic_dual_zero_and_heat() {
        let template = grid(0.05, 0.00125);
        let v = deterministic_log_laplace(&TestFunction::zero(), 1.0, &template, 0.5).unwrap();
        assert!(v.values().iter().all(|&y| y == 0.0));
        let v = deterministic_log_laplace(&TestFunction::gaussian(0.0, 0.2), 0.0, &template, 0.3).unwrap();
        for i in 0..v.cells() {
            let exact = heat_kernel(0.0, 0.5, v.x_at(i));
            assert!((v.values()[i] - exact).abs() <= 0.01 * heat_kernel(0.0, 0.5, 0.0));
        }
    }

    #[test]
    fn comparison_principle() {
        let template = SpdeGrid::new(-6.0, 6.0, 0.1, 0.005, Boundary::Neumann).unwrap();
        let mut rng = replica_rng(42, Stream::Walks, 0);
        for _ in 0..100 {
            let (c1, v1, a1) = (rng.random_range(-1.0..1.0), rng.random_range(0.2..2.0), rng.random_range(0.1..3.0));
            let bump = rng.random_range(0.0..1.0);
            let f1 = TestFunction::gaussian(c1, v1).scaled(a1);
            let g = f1.clone();
            let f2 = TestFunction::new("f2", move |x| g.eval(x) + bump * heat_kernel(0.0, 1.0, x), &[]);
            let r1 = deterministic_log_laplace(&f1, 1.0, &template, 0.4).unwrap();
            let r2 = deterministic_log_laplace(&f2, 1.0, &template, 0.4).unwrap();
            assert!(r1.values().iter().zip(r2.values()).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn deterministic_dual_loses_mass() {
        let template = grid(0.05, 0.00125);
        let phi = TestFunction::gaussian(0.0, 0.5).scaled(2.0);
        let mut prev = template.clone().sample(&phi).mass();
        for t in [0.05, 0.1, 0.2, 0.4] {
            let m = deterministic_log_laplace(&phi, 1.0, &template, t).unwrap().mass();
            assert!(m < prev);
            prev = m;
        }
    }

    #[test]
    fn grid_pair_examples() {
        let g = grid(0.05, 0.00125).with_profile(|x| heat_kernel(0.5, 0.3, x));
        assert!((grid_pair(&g, &TestFunction::constant(1.0)) - g.mass()).abs() < 1e-15);
        assert_eq!(grid_pair(&grid(0.05, 0.00125), &TestFunction::gaussian(0.0, 1.0)), 0.0);
        // int psi^{0.5}_{0.3} psi^0_1 = psi^0_{1.3}(0.5)
        let got = grid_pair(&g, &TestFunction::gaussian(0.0, 1.0));
        assert!((got - heat_kernel(0.0, 1.3, 0.5)).abs() < 1e-4);
    }

    #[test]
    fn interpolation() {
        let g = SpdeGrid::new(0.0, 1.0, 0.25, 0.01, Boundary::Neumann).unwrap().with_profile(|x| x);
        assert!((g.interpolate(0.5) - 0.5).abs() < 1e-15);
        assert!((g.interpolate(0.3) - 0.3).abs() < 1e-15);
        assert_eq!(g.interpolate(-1.0), 0.125);
        assert_eq!(g.interpolate(2.0), 0.875);
    }

    #[test]
    fn stays_finite_and_nonnegative() {
        let h = 0.05;
        let params = SpdeParams::new(2.0, 1.0, 0.0, 5).unwrap();
        let mut rng = replica_rng(9, Stream::SpdeForward, 0);
        let mut fwd = grid(h, h * h / 2.0).with_profile(|x| heat_kernel(0.0, 0.5, x));
        let mut dual = grid(h, h * h / 2.0).sample(&TestFunction::gaussian(0.0, 1.0).scaled(3.0));
        for _ in 0..100_000 {
            em_step_forward(&mut fwd, &params, &mut rng).unwrap();
            em_step_dual(&mut dual, &params, &mut rng).unwrap();
        }
        assert!(fwd.values().iter().chain(dual.values()).all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn noise_increment_variance() {
        // gamma u + 2 beta^2 u^2 = 1 at u = 1 with gamma = 1, beta = 0
        let (h, tau) = (0.05, 1e-3);
        let params = SpdeParams::new(1.0, 0.0, tau, 3).unwrap();
        let increments: Vec<f64> = map_replicas(200, None, |r| {
            let mut rng = replica_rng(3, Stream::SpdeForward, r);
            let mut g = SpdeGrid::new(-1.0, 1.0, h, tau, Boundary::Neumann).unwrap().with_profile(|_| 1.0);
            em_step_forward(&mut g, &params, &mut rng).unwrap();
            g.values().iter().map(|u| (u - 1.0) * (u - 1.0)).collect::<Vec<_>>()
        })
        .concat();
        let est = Estimate::from_samples(&increments);
        assert!(est.within(tau / h, 3.0, 0.0), "{est:?} vs {}", tau / h);
    }

    #[test]
    fn forward_mass_is_a_martingale() {
        let (h, tau) = (0.1, 0.005);
        let params = SpdeParams::new(1.0, 0.0, 0.5, 8).unwrap();
        let init = SpdeGrid::new(-3.0, 3.0, h, tau, Boundary::Neumann)
            .unwrap()
            .with_profile(|x| 1.0 + 0.5 * (x * std::f64::consts::PI / 3.0).cos());
        let m0 = init.mass();
        let masses: Vec<f64> = map_replicas(1000, None, |r| {
            let mut rng = replica_rng(8, Stream::SpdeForward, r);
            solve_forward(&init, &params, &mut rng).unwrap().mass()
        });
        let est = Estimate::from_samples(&masses);
        assert!(est.within(m0, 3.0, 0.0), "{est:?} vs {m0}");
    }
}
