//! Branching random walks in a space-time random environment.
//!
//! The crate is organised bottom-up:
//!
//! * [`env`] - the i.i.d. offspring-law field, addressed by `(n, x)` through a
//!   counter-based hash so it is never stored.
//! * [`particles`] - the site-aggregated lattice simulator and ensemble runner.
//! * [`measure`] - the scaled measure-valued process, the discrete generator,
//!   martingale decomposition, exact predictable brackets and heat kernels.
//! * [`walks`] - exact simple-random-walk laws and collision-count functionals.
//! * [`spde`] - explicit Euler-Maruyama solvers for the limiting SPDE, its dual
//!   and the deterministic log-Laplace equation.
//! * [`duality`] - Monte Carlo estimators for both sides of the Laplace
//!   functional duality.
//! * [`runner`] - JSON experiment configs and the `sbmre` command line driver.

pub mod duality;
pub mod ensemble;
pub mod env;
pub mod measure;
pub mod particles;
pub mod rng;
pub mod runner;
pub mod spde;
pub mod stats;
pub mod testfn;
pub mod walks;

pub use env::{EnvSpec, LawKind, OffspringLaw};
pub use measure::MartingaleLedger;
pub use particles::{ParticleField, RunConfig, StepRecord};
pub use spde::{Boundary, SpdeGrid, SpdeParams};
pub use stats::Estimate;
pub use testfn::TestFunction;
