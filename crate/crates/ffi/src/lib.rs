//! C ABI for the `sbmre` simulator, exact oracles and SPDE stepper.
//!
//! Objects are opaque handles created by `*_new` and released by `*_free`.
//! Fallible calls return an [`SbmreStatus`]; on failure a message is kept per
//! thread and can be read with [`sbmre_last_error`]. Panics never cross the
//! boundary: they are reported as `SBMRE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, c_void};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rand_chacha::ChaCha8Rng;
use sbmre::env::{audit_env, EnvSpec};
use sbmre::measure::{gaussian_kernel, measure_apply};
use sbmre::particles::{init_field, step, ParticleField};
use sbmre::rng::{replica_rng, Stream};
use sbmre::spde::{em_step_dual, em_step_forward, Boundary, SpdeGrid, SpdeParams};
use sbmre::testfn::TestFunction;
use sbmre::walks::{collision_functional_pair, pair_moment_exact, srw_pmf};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbmreStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Simulation = 4,
    Numerical = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbmreBoundary {
    Neumann = 0,
    Dirichlet0 = 1,
}

/// Exact environment moments of the example law.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SbmreAuditRow {
    pub beta: f64,
    pub n: u64,
    pub mean_m1: f64,
    pub gamma_row: f64,
    pub mean_m4: f64,
    pub beta2_row: f64,
    pub fourth_row: f64,
}

/// Environment field handle.
pub struct SbmreEnv {
    spec: EnvSpec,
}

/// Particle configuration with its own movement stream.
pub struct SbmreField {
    field: ParticleField,
    rng: ChaCha8Rng,
}

/// SPDE grid with its coefficients and noise stream.
pub struct SbmreSpdeGrid {
    grid: SpdeGrid,
    params: SpdeParams,
    rng: ChaCha8Rng,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

type Failure = (SbmreStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SbmreStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SbmreStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SbmreStatus::Panic
        }
    }
}

fn invalid(e: impl ToString) -> Failure {
    (SbmreStatus::InvalidArgument, e.to_string())
}

fn null(name: &str) -> Failure {
    (SbmreStatus::NullPointer, format!("{name} is null"))
}

/// Writes `value` through `out`, failing on null.
///
/// # Safety
/// `out` must be null or valid for writes.
unsafe fn put<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

/// # Safety
/// `p` must be null or point to a live `T`.
unsafe fn borrow<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

/// # Safety
/// `p` must be null or point to a live `T` not aliased elsewhere.
unsafe fn borrow_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap - 1` bytes) and returns its full length.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes of writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// NUL-terminated library version; static storage.
#[no_mangle]
pub extern "C" fn sbmre_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates the example-law environment; requires `beta <= n^(1/4)`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_env_new(n: u64, beta: f64, seed: u64, out: *mut *mut SbmreEnv) -> SbmreStatus {
    guard(|| {
        let spec = EnvSpec::example(n, beta, seed).map_err(invalid)?;
        put(out, Box::into_raw(Box::new(SbmreEnv { spec })), "out")
    })
}

/// # Safety
/// `env` must be null or a handle from [`sbmre_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbmre_env_free(env: *mut SbmreEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Environment sign at lattice time `n` and site `x`; 0 for a null handle.
///
/// # Safety
/// `env` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbmre_env_sample_xi(env: *const SbmreEnv, n: u64, x: i64) -> i8 {
    env.as_ref().map_or(0, |e| e.spec.sample_xi(n, x))
}

/// Probability of two offspring under sign `xi` (must be +1 or -1).
///
/// # Safety
/// `env` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_env_branch_probability(env: *const SbmreEnv, xi: i8, out: *mut f64) -> SbmreStatus {
    guard(|| {
        let env = borrow(env, "env")?;
        if xi != 1 && xi != -1 {
            return Err(invalid(format!("xi must be +1 or -1, got {xi}")));
        }
        put(out, env.spec.branch_probability(xi), "out")
    })
}

/// Exact environment moments of the example law at `(beta, n)`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_audit_example(beta: f64, n: u64, out: *mut SbmreAuditRow) -> SbmreStatus {
    guard(|| {
        let row = audit_env(&EnvSpec::example(n, beta, 0).map_err(invalid)?);
        let row = SbmreAuditRow {
            beta: row.beta,
            n: row.n,
            mean_m1: row.mean_m1,
            gamma_row: row.gamma_row,
            mean_m4: row.mean_m4,
            beta2_row: row.beta2_row,
            fourth_row: row.fourth_row,
        };
        put(out, row, "out")
    })
}

/// Creates a field with `counts[i]` particles at `sites[i]`. Its movement
/// stream is derived from `seed`.
///
/// # Safety
/// `sites` and `counts` must be valid for `len` reads (either may be null
/// when `len == 0`); `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_field_new(
    sites: *const i64,
    counts: *const u64,
    len: usize,
    seed: u64,
    out: *mut *mut SbmreField,
) -> SbmreStatus {
    guard(|| {
        let initial: Vec<(i64, u64)> = if len == 0 {
            Vec::new()
        } else {
            if sites.is_null() || counts.is_null() {
                return Err(null("sites/counts"));
            }
            let s = std::slice::from_raw_parts(sites, len);
            let c = std::slice::from_raw_parts(counts, len);
            s.iter().copied().zip(c.iter().copied()).collect()
        };
        let field = init_field(&initial).map_err(invalid)?;
        let rng = replica_rng(seed, Stream::Movement, 0);
        put(out, Box::into_raw(Box::new(SbmreField { field, rng })), "out")
    })
}

/// # Safety
/// `field` must be null or a handle from [`sbmre_field_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbmre_field_free(field: *mut SbmreField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Advances the field one lattice step in `env`.
///
/// # Safety
/// Both handles must be live; `field` must not be used concurrently.
#[no_mangle]
pub unsafe extern "C" fn sbmre_field_step(field: *mut SbmreField, env: *const SbmreEnv) -> SbmreStatus {
    guard(|| {
        let f = borrow_mut(field, "field")?;
        let env = borrow(env, "env")?;
        let (next, _) = step(&f.field, &env.spec, &mut f.rng).map_err(|e| (SbmreStatus::Simulation, e.to_string()))?;
        f.field = next;
        Ok(())
    })
}

/// Total particle count; 0 for a null handle.
///
/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbmre_field_total_mass(field: *const SbmreField) -> u64 {
    field.as_ref().map_or(0, |f| f.field.total_mass())
}

/// Lattice time of the field; 0 for a null handle.
///
/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbmre_field_step_index(field: *const SbmreField) -> u64 {
    field.as_ref().map_or(0, |f| f.field.step_n)
}

/// Number of occupied sites; 0 for a null handle.
///
/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbmre_field_occupied(field: *const SbmreField) -> usize {
    field.as_ref().map_or(0, |f| f.field.occupied_sites())
}

/// Copies occupied sites and counts in increasing site order. `written`
/// receives the number of entries, or the required capacity on
/// `SBMRE_STATUS_BUFFER_TOO_SMALL`.
///
/// # Safety
/// `sites` and `counts` must be valid for `cap` writes; `written` valid for
/// writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_field_copy_counts(
    field: *const SbmreField,
    sites: *mut i64,
    counts: *mut u64,
    cap: usize,
    written: *mut usize,
) -> SbmreStatus {
    guard(|| {
        let f = borrow(field, "field")?;
        let entries = f.field.counts();
        put(written, entries.len(), "written")?;
        if entries.len() > cap {
            return Err((SbmreStatus::BufferTooSmall, format!("need {} entries, have {cap}", entries.len())));
        }
        if !entries.is_empty() && (sites.is_null() || counts.is_null()) {
            return Err(null("sites/counts"));
        }
        for (i, &(x, c)) in entries.iter().enumerate() {
            *sites.add(i) = x;
            *counts.add(i) = c;
        }
        Ok(())
    })
}

/// `X(phi) = (1/N) sum_x B_x phi(x / sqrt N)` with a caller-supplied `phi`.
///
/// # Safety
/// `field` must be live, `phi` callable with `user`, `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_field_measure_apply(
    field: *const SbmreField,
    n_scale: u64,
    phi: Option<extern "C" fn(f64, *mut c_void) -> f64>,
    user: *mut c_void,
    out: *mut f64,
) -> SbmreStatus {
    guard(|| {
        let f = borrow(field, "field")?;
        let phi = phi.ok_or_else(|| null("phi"))?;
        if n_scale == 0 {
            return Err(invalid("n_scale must be positive"));
        }
        let user = user as usize;
        let tf = TestFunction::new("callback", move |y| phi(y, user as *mut c_void), &[]);
        put(out, measure_apply(&f.field, n_scale, &tf), "out")
    })
}

/// `P(Y_n = x)` for a simple random walk from the origin.
#[no_mangle]
pub extern "C" fn sbmre_srw_pmf(n: u64, x: i64) -> f64 {
    srw_pmf(n, x)
}

/// `E[(1 + lambda)^{#collisions at times 1..n}]` for two independent walks.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_collision_pair(n: u64, lambda: f64, out: *mut f64) -> SbmreStatus {
    guard(|| put(out, collision_functional_pair(n, lambda).map_err(invalid)?, "out"))
}

/// Exact `E[B1_n B2_n]` for two particles started at the origin.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_pair_moment_exact(n: u64, lambda: f64, out: *mut f64) -> SbmreStatus {
    guard(|| put(out, pair_moment_exact(n, lambda).map_err(invalid)?, "out"))
}

/// Heat kernel `psi^x_t(y)`; `t` must be positive.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_gaussian_kernel(x: f64, t: f64, y: f64, out: *mut f64) -> SbmreStatus {
    guard(|| put(out, gaussian_kernel(x, t, y).map_err(invalid)?, "out"))
}

/// Creates a zero grid on `[x_min, x_max]` with step `h` and time step
/// `tau <= h^2 / 2`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_spde_grid_new(
    x_min: f64,
    x_max: f64,
    h: f64,
    tau: f64,
    boundary: SbmreBoundary,
    gamma: f64,
    beta: f64,
    noise_seed: u64,
    out: *mut *mut SbmreSpdeGrid,
) -> SbmreStatus {
    guard(|| {
        let boundary = match boundary {
            SbmreBoundary::Neumann => Boundary::Neumann,
            SbmreBoundary::Dirichlet0 => Boundary::Dirichlet0,
        };
        let grid = SpdeGrid::new(x_min, x_max, h, tau, boundary).map_err(invalid)?;
        let params = SpdeParams::new(gamma, beta, tau, noise_seed).map_err(invalid)?;
        let rng = replica_rng(noise_seed, Stream::SpdeForward, 0);
        put(out, Box::into_raw(Box::new(SbmreSpdeGrid { grid, params, rng })), "out")
    })
}

/// # Safety
/// `grid` must be null or a handle from [`sbmre_spde_grid_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sbmre_spde_grid_free(grid: *mut SbmreSpdeGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Number of cells; 0 for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sbmre_spde_grid_len(grid: *const SbmreSpdeGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.grid.cells())
}

/// Overwrites the cell values (`len` must equal the cell count).
///
/// # Safety
/// `grid` must be live and `values` valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn sbmre_spde_grid_set_values(
    grid: *mut SbmreSpdeGrid,
    values: *const f64,
    len: usize,
) -> SbmreStatus {
    guard(|| {
        let g = borrow_mut(grid, "grid")?;
        if values.is_null() {
            return Err(null("values"));
        }
        let vals = std::slice::from_raw_parts(values, len);
        g.grid = g.grid.clone().with_values(vals).map_err(invalid)?;
        Ok(())
    })
}

/// Copies the cell values into `out` (capacity `cap`).
///
/// # Safety
/// `grid` must be live and `out` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn sbmre_spde_grid_values(grid: *const SbmreSpdeGrid, out: *mut f64, cap: usize) -> SbmreStatus {
    guard(|| {
        let g = borrow(grid, "grid")?;
        let vals = g.grid.values();
        if vals.len() > cap {
            return Err((SbmreStatus::BufferTooSmall, format!("need {} values, have {cap}", vals.len())));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(vals.as_ptr(), out, vals.len());
        Ok(())
    })
}

/// Advances the forward equation `steps` times.
///
/// # Safety
/// `grid` must be live and not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn sbmre_spde_grid_step_forward(grid: *mut SbmreSpdeGrid, steps: u64) -> SbmreStatus {
    guard(|| {
        let g = borrow_mut(grid, "grid")?;
        for _ in 0..steps {
            em_step_forward(&mut g.grid, &g.params, &mut g.rng).map_err(|e| (SbmreStatus::Numerical, e.to_string()))?;
        }
        Ok(())
    })
}

/// Advances the dual equation `steps` times.
///
/// # Safety
/// `grid` must be live and not used concurrently.
#[no_mangle]
pub unsafe extern "C" fn sbmre_spde_grid_step_dual(grid: *mut SbmreSpdeGrid, steps: u64) -> SbmreStatus {
    guard(|| {
        let g = borrow_mut(grid, "grid")?;
        for _ in 0..steps {
            em_step_dual(&mut g.grid, &g.params, &mut g.rng).map_err(|e| (SbmreStatus::Numerical, e.to_string()))?;
        }
        Ok(())
    })
}
