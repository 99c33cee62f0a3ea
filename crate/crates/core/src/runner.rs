//! JSON experiment configs, validation and the subcommand drivers behind the
//! `sbmre` binary.
//!
//! Every subcommand writes `config.echo.json` (the validated config with
//! defaults filled in) and `report.json` into the output directory, plus the
//! CSV files switched on in the `outputs` block. Reports carry no wall-clock
//! data, so identical configs give byte-identical files for any worker count.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::duality::{
    dual_laplace_samples, forward_laplace_samples, DualityReport, ForwardSource, InitialMeasure,
    DEFAULT_DISCRETIZATION_BUDGET,
};
use crate::ensemble::map_replicas;
use crate::env::{audit_assumption_a, audit_env, EnvError, EnvSpec, LawKind, OffspringLaw};
use crate::measure::{heat_kernel, measure_apply, write_ledger_row, MartingaleLedger, LEDGER_HEADER};
use crate::particles::{
    simulate_replica, write_snapshot_rows, write_step_rows, EnvMode, RunConfig, SimError, SNAPSHOT_HEADER,
    STEP_HEADER,
};
use crate::rng::{replica_rng, Stream};
use crate::spde::{solve_forward, write_grid_rows, Boundary, SpdeError, SpdeGrid, SpdeParams, GRID_HEADER};
use crate::stats::{pairwise_sum_by, Estimate};
use crate::testfn::{PhiSpec, TestFunction};
use crate::walks::{collision_functional_pair, pair_moment_exact, srw_pmf};

/// Residual bound of the decomposition check.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subcommand {
    Simulate,
    Moments,
    Duality,
    Spde,
    AuditEnv,
    IdentityCheck,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Moments => "moments",
            Subcommand::Duality => "duality",
            Subcommand::Spde => "spde",
            Subcommand::AuditEnv => "audit-env",
            Subcommand::IdentityCheck => "identity-check",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawBlock {
    #[default]
    Example,
    /// Offspring tables `[[k, p], ...]` for `xi = +1` and `xi = -1`.
    Custom { plus: Vec<(u64, f64)>, minus: Vec<(u64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvBlock {
    #[serde(rename = "N")]
    pub n: u64,
    pub beta: f64,
    pub seed: u64,
    #[serde(default)]
    pub law: LawBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub replicas: u64,
    pub horizon_steps: u64,
    pub seed: u64,
    #[serde(default)]
    pub mode: EnvMode,
    /// `[[site, count], ...]`; defaults to `N` particles at the origin.
    #[serde(default)]
    pub initial: Option<Vec<(i64, u64)>>,
    #[serde(default)]
    pub tagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpdeBlock {
    pub x_min: f64,
    pub x_max: f64,
    pub h: f64,
    pub tau: f64,
    #[serde(default)]
    pub boundary: Boundary,
    pub gamma: f64,
    pub beta: f64,
    pub t_end: f64,
    pub noise_seed: u64,
    #[serde(default = "one_replica")]
    pub replicas: u64,
    /// Dual noise coefficient; `sqrt(2) * beta` when absent.
    #[serde(default)]
    pub dual_noise: Option<f64>,
    /// Initial density of the forward equation; a unit-mass Gaussian of
    /// variance 0.25 when absent.
    #[serde(default)]
    pub initial: Option<PhiSpec>,
}

fn one_replica() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualitySource {
    #[default]
    Particles,
    Spde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualityBlock {
    pub t: f64,
    #[serde(default)]
    pub source: DualitySource,
    pub forward_replicas: u64,
    pub dual_replicas: u64,
    #[serde(default = "default_budget")]
    pub budget: f64,
}

fn default_budget() -> f64 {
    DEFAULT_DISCRETIZATION_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditBlock {
    pub betas: Vec<f64>,
    #[serde(rename = "N")]
    pub ns: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsBlock {
    /// Levels `a` of the maximal inequality `P(sup X(1) >= a) <= X_0(1) / a`.
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputsBlock {
    pub snapshots: bool,
    pub steps: bool,
    pub ledger: bool,
    pub grids: bool,
    pub per_replica: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spde: Option<SpdeBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duality: Option<DualityBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<AuditBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<MomentsBlock>,
    #[serde(default)]
    pub phi: Vec<PhiSpec>,
    #[serde(default)]
    pub outputs: OutputsBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

/// One validation problem, located by a JSON pointer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub pointer: String,
    pub message: String,
}

impl ConfigIssue {
    fn new(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self { pointer: pointer.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "{at}: {}", self.message)
    }
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid config:\n{}", .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<ConfigIssue>),
    #[error("replica {replica}: {message}")]
    Replica { replica: u64, message: String },
    #[error("{0}")]
    Runtime(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl RunnerError {
    /// 2 for config errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn replica_error(replica: u64) -> impl Fn(SimError) -> RunnerError {
    move |e| RunnerError::Replica { replica, message: e.to_string() }
}

fn runtime(e: impl fmt::Display) -> RunnerError {
    RunnerError::Runtime(e.to_string())
}

/// Applies `key=value` overrides, where `key` is a dotted path (`env.beta`,
/// `phi.0.variance`) and `value` is JSON or, failing that, a bare string.
pub fn apply_overrides(value: &mut Value, overrides: &[String]) -> Result<(), Vec<ConfigIssue>> {
    let mut issues = Vec::new();
    for item in overrides {
        let Some((key, raw)) = item.split_once('=') else {
            issues.push(ConfigIssue::new("", format!("override {item:?} is not key=value")));
            continue;
        };
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let pointer = format!("/{}", key.replace('.', "/"));
        if let Err(msg) = set_path(value, key, parsed) {
            issues.push(ConfigIssue::new(pointer, msg));
        }
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

fn set_path(root: &mut Value, key: &str, new: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err("empty path segment".into());
        }
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| format!("{part:?} is not an array index"))?;
                let len = items.len();
                items.get_mut(idx).ok_or_else(|| format!("index {idx} out of range (length {len})"))?
            }
            Value::Object(map) => {
                map.entry(part.to_string()).or_insert_with(|| if last { Value::Null } else { json!({}) })
            }
            Value::Null => {
                *cur = json!({});
                cur.as_object_mut().expect("just set").entry(part.to_string()).or_insert(Value::Null)
            }
            _ => return Err(format!("cannot descend into a scalar at {part:?}")),
        };
    }
    *cur = new;
    Ok(())
}

/// Parses and fully validates a config for `sub`, filling defaults. All
/// problems are reported together.
pub fn validate_config(raw: &str, sub: Subcommand) -> Result<ExperimentConfig, Vec<ConfigIssue>> {
    let value: Value =
        serde_json::from_str(raw).map_err(|e| vec![ConfigIssue::new("", format!("not valid JSON: {e}"))])?;
    validate_value(value, sub)
}

pub fn validate_value(value: Value, sub: Subcommand) -> Result<ExperimentConfig, Vec<ConfigIssue>> {
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let pointer = if path == "." { String::new() } else { format!("/{}", path.replace('.', "/")) };
        vec![ConfigIssue::new(pointer, e.into_inner().to_string())]
    })?;
    let mut issues = Vec::new();

    let need_particles = matches!(sub, Subcommand::Simulate | Subcommand::Moments | Subcommand::IdentityCheck)
        || (sub == Subcommand::Duality
            && cfg.duality.as_ref().is_some_and(|d| d.source == DualitySource::Particles));
    if need_particles {
        if cfg.env.is_none() {
            issues.push(ConfigIssue::new("/env", format!("block required by {}", sub.name())));
        }
        if cfg.run.is_none() {
            issues.push(ConfigIssue::new("/run", format!("block required by {}", sub.name())));
        }
    }
    if matches!(sub, Subcommand::Spde | Subcommand::Duality) && cfg.spde.is_none() {
        issues.push(ConfigIssue::new("/spde", format!("block required by {}", sub.name())));
    }
    if sub == Subcommand::Duality && cfg.duality.is_none() {
        issues.push(ConfigIssue::new("/duality", "block required by duality"));
    }
    if sub == Subcommand::AuditEnv && cfg.env.is_none() && cfg.audit.is_none() {
        issues.push(ConfigIssue::new("/audit", "audit-env needs an audit block or an env block"));
    }

    if let Some(env) = &cfg.env {
        if let Err(e) = build_env(env) {
            let pointer = match e {
                EnvError::ZeroScale => "/env/N",
                EnvError::BadBeta(_) | EnvError::BetaTooLarge { .. } => "/env/beta",
                EnvError::BadLaw(_) => "/env/law",
            };
            issues.push(ConfigIssue::new(pointer, e.to_string()));
        }
    }
    if let Some(run) = &mut cfg.run {
        if run.replicas == 0 {
            issues.push(ConfigIssue::new("/run/replicas", "must be positive"));
        }
        if run.initial.is_none() {
            if let Some(env) = &cfg.env {
                run.initial = Some(vec![(0, env.n)]);
            }
        }
        if let Some(initial) = &run.initial {
            if initial.iter().map(|&(_, c)| c).sum::<u64>() == 0 {
                issues.push(ConfigIssue::new("/run/initial", "needs at least one particle"));
            }
            if run.tagged && initial.iter().map(|&(_, c)| c).sum::<u64>() > 4096 {
                issues.push(ConfigIssue::new("/run/tagged", "tagging is limited to 4096 initial particles"));
            }
        }
    }
    if let Some(spde) = &mut cfg.spde {
        if let Err(e) = SpdeGrid::new(spde.x_min, spde.x_max, spde.h, spde.tau, spde.boundary) {
            let pointer = match e {
                SpdeError::Unstable { .. } => "/spde/tau",
                _ => "/spde/h",
            };
            issues.push(ConfigIssue::new(pointer, e.to_string()));
        }
        for (name, v) in [("gamma", spde.gamma), ("beta", spde.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                issues.push(ConfigIssue::new(format!("/spde/{name}"), "must be finite and nonnegative"));
            }
        }
        if !(spde.t_end.is_finite() && spde.t_end > 0.0) {
            issues.push(ConfigIssue::new("/spde/t_end", "must be finite and positive"));
        }
        if spde.dual_noise.is_some_and(|s| !(s.is_finite() && s >= 0.0)) {
            issues.push(ConfigIssue::new("/spde/dual_noise", "must be finite and nonnegative"));
        }
        if spde.replicas == 0 {
            issues.push(ConfigIssue::new("/spde/replicas", "must be positive"));
        }
        spde.initial.get_or_insert(PhiSpec::Gaussian { center: 0.0, variance: 0.25, scale: 1.0 });
    }
    if let Some(d) = &cfg.duality {
        if !(d.t.is_finite() && d.t >= 0.0) {
            issues.push(ConfigIssue::new("/duality/t", "must be finite and nonnegative"));
        }
        if d.forward_replicas == 0 {
            issues.push(ConfigIssue::new("/duality/forward_replicas", "must be positive"));
        }
        if d.dual_replicas == 0 {
            issues.push(ConfigIssue::new("/duality/dual_replicas", "must be positive"));
        }
        if !(d.budget.is_finite() && d.budget >= 0.0) {
            issues.push(ConfigIssue::new("/duality/budget", "must be finite and nonnegative"));
        }
    }
    if sub == Subcommand::AuditEnv && cfg.audit.is_none() {
        if let Some(env) = &cfg.env {
            cfg.audit = Some(AuditBlock { betas: vec![env.beta], ns: vec![16, 64, 256, 1024] });
        }
    }
    if let Some(audit) = &cfg.audit {
        for (i, &beta) in audit.betas.iter().enumerate() {
            for &n in &audit.ns {
                if let Err(e) = EnvSpec::example(n, beta, 0) {
                    issues.push(ConfigIssue::new(format!("/audit/betas/{i}"), e.to_string()));
                }
            }
        }
        if audit.betas.is_empty() || audit.ns.is_empty() {
            issues.push(ConfigIssue::new("/audit", "betas and N must be nonempty"));
        }
    }
    if sub == Subcommand::Moments && cfg.moments.is_none() {
        cfg.moments = Some(MomentsBlock { levels: vec![2.0, 4.0, 8.0] });
    }
    if let Some(m) = &cfg.moments {
        for (i, &a) in m.levels.iter().enumerate() {
            if !(a.is_finite() && a > 0.0) {
                issues.push(ConfigIssue::new(format!("/moments/levels/{i}"), "must be positive"));
            }
        }
    }
    if cfg.phi.is_empty() {
        cfg.phi.push(PhiSpec::Gaussian { center: 0.0, variance: 1.0, scale: 1.0 });
    }
    for (i, spec) in cfg.phi.iter().enumerate() {
        if let PhiSpec::Gaussian { variance, .. } = spec {
            if !(variance.is_finite() && *variance > 0.0) {
                issues.push(ConfigIssue::new(format!("/phi/{i}/variance"), "must be positive"));
            }
        }
    }
    if cfg.workers == Some(0) {
        issues.push(ConfigIssue::new("/workers", "must be positive"));
    }

    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(issues)
    }
}

impl ExperimentConfig {
    /// Problems that do not block a run.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(initial) = self.run.as_ref().and_then(|r| r.initial.as_ref()) {
            if initial.iter().any(|&(x, _)| x.rem_euclid(2) != 0) {
                out.push("run.initial has odd sites; parity checks are disabled".to_string());
            }
        }
        out
    }

    /// Pretty JSON with defaults filled in; feeding it back through
    /// [`validate_config`] reproduces it byte for byte.
    pub fn echo(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn build_env(block: &EnvBlock) -> Result<EnvSpec, EnvError> {
    let kind = match &block.law {
        LawBlock::Example => LawKind::ExampleBernoulli,
        LawBlock::Custom { plus, minus } => LawKind::CustomTable {
            plus: OffspringLaw::new(plus.clone())?,
            minus: OffspringLaw::new(minus.clone())?,
        },
    };
    EnvSpec::new(block.n, block.beta, block.seed, kind)
}

/// One PASS/FAIL line of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub z: Option<f64>,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, z: Option<f64>, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, z, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let z = self.z.map(|z| format!(" z={z:+.3}")).unwrap_or_default();
        format!("{verdict} {}{z} {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub subcommand: &'static str,
    pub checks: Vec<Check>,
    pub results: Value,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

struct Out {
    dir: PathBuf,
}

impl Out {
    fn write(&self, name: &str, contents: &[u8]) -> Result<(), RunnerError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|source| RunnerError::Io { path, source })
    }

    fn csv(&self, name: &str, header: &str, body: impl IntoIterator<Item = String>) -> Result<(), RunnerError> {
        let path = self.dir.join(name);
        let io_err = |source| RunnerError::Io { path: path.clone(), source };
        let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
        writeln!(w, "{header}").map_err(io_err)?;
        for chunk in body {
            w.write_all(chunk.as_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }
}

/// Runs `sub` on a validated config, writing artifacts into `out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    sub: Subcommand,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<Outcome, RunnerError> {
    fs::create_dir_all(out_dir).map_err(|source| RunnerError::Io { path: out_dir.to_path_buf(), source })?;
    let out = Out { dir: out_dir.to_path_buf() };
    out.write("config.echo.json", cfg.echo().as_bytes())?;
    let workers = workers.or(cfg.workers);
    let (checks, results) = match sub {
        Subcommand::Simulate => simulate(cfg, &out, workers)?,
        Subcommand::Moments => moments(cfg, workers)?,
        Subcommand::IdentityCheck => identity_check(cfg, &out, workers)?,
        Subcommand::Duality => duality(cfg, &out, workers)?,
        Subcommand::Spde => spde(cfg, &out, workers)?,
        Subcommand::AuditEnv => audit(cfg, &out)?,
    };
    let outcome = Outcome { subcommand: sub.name(), checks, results };
    let mut report = serde_json::to_string_pretty(&outcome).map_err(runtime)?;
    report.push('\n');
    out.write("report.json", report.as_bytes())?;
    Ok(outcome)
}

/// Validates, runs and prints; returns the process exit code.
pub fn run_cli(config_path: &Path, sub: Subcommand, out_dir: &Path, workers: Option<usize>, overrides: &[String]) -> i32 {
    let started = Instant::now();
    let result = load_config(config_path, sub, overrides)
        .and_then(|cfg| {
            for w in cfg.warnings() {
                eprintln!("warning: {w}");
            }
            run_experiment(&cfg, sub, out_dir, workers)
        });
    match result {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!("{}", c.line());
            }
            eprintln!("{} finished in {:.2} s", sub.name(), started.elapsed().as_secs_f64());
            if outcome.passed() {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn load_config(path: &Path, sub: Subcommand, overrides: &[String]) -> Result<ExperimentConfig, RunnerError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| RunnerError::Config(vec![ConfigIssue::new("", format!("cannot read {}: {e}", path.display()))]))?;
    let mut value: Value = serde_json::from_str(&raw)
        .map_err(|e| RunnerError::Config(vec![ConfigIssue::new("", format!("not valid JSON: {e}"))]))?;
    apply_overrides(&mut value, overrides).map_err(RunnerError::Config)?;
    validate_value(value, sub).map_err(RunnerError::Config)
}

fn particle_config(cfg: &ExperimentConfig) -> Result<RunConfig, RunnerError> {
    let (Some(env), Some(run)) = (&cfg.env, &cfg.run) else {
        return Err(runtime("env and run blocks are required"));
    };
    let env = build_env(env).map_err(runtime)?;
    let initial = run.initial.clone().unwrap_or_else(|| vec![(0, env.scale_n())]);
    Ok(RunConfig {
        env,
        initial,
        horizon_steps: run.horizon_steps,
        replicas: run.replicas,
        mode: run.mode,
        seed: run.seed,
        tagged: run.tagged,
    })
}

fn phis(cfg: &ExperimentConfig) -> Vec<TestFunction> {
    cfg.phi.iter().map(PhiSpec::build).collect()
}

type Checked = (Vec<Check>, Value);

fn simulate(cfg: &ExperimentConfig, out: &Out, workers: Option<usize>) -> Result<Checked, RunnerError> {
    let rc = particle_config(cfg)?;
    let parity = rc.even_start();
    let (want_snap, want_steps) = (cfg.outputs.snapshots, cfg.outputs.steps);
    let per_replica = map_replicas(rc.replicas, workers, |r| {
        let mut snap = Vec::new();
        let mut steps = Vec::new();
        let mut parity_ok = true;
        let last = simulate_replica(&rc, r, |f, rec| {
            parity_ok &= !parity || f.parity_consistent();
            if want_snap {
                write_snapshot_rows(&mut snap, r, f).expect("write to memory");
            }
            if let (true, Some(rec)) = (want_steps, rec) {
                write_step_rows(&mut steps, r, rec).expect("write to memory");
            }
        })
        .map_err(replica_error(r))?;
        Ok((last.total_mass() as f64, parity_ok, snap, steps))
    })
    .into_iter()
    .collect::<Result<Vec<_>, RunnerError>>()?;

    let m0 = rc.initial.iter().map(|&(_, c)| c as f64).sum::<f64>();
    let ratios: Vec<f64> = per_replica.iter().map(|p| p.0 / m0).collect();
    let est = Estimate::from_samples(&ratios);
    let z = est.z_against(1.0, 0.0);
    let mut checks = vec![Check::new(
        "total-mass",
        z.abs() <= 3.0,
        Some(z),
        format!("E[B_T/B_0] = {:.6} +- {:.6} (expected 1)", est.mean, est.se),
    )];
    if parity {
        let ok = per_replica.iter().all(|p| p.1);
        checks.push(Check::new("parity", ok, None, "occupied sites have the parity of the step"));
    }
    if want_snap {
        out.csv("snapshots.csv", SNAPSHOT_HEADER, per_replica.iter().map(|p| String::from_utf8_lossy(&p.2).into_owned()))?;
    }
    if want_steps {
        out.csv("steps.csv", STEP_HEADER, per_replica.iter().map(|p| String::from_utf8_lossy(&p.3).into_owned()))?;
    }
    Ok((checks, json!({ "mean_mass_ratio": est, "horizon_steps": rc.horizon_steps, "replicas": rc.replicas })))
}

/// `E[X_n(phi)]` from an arbitrary initial configuration.
fn mean_measure_from(initial: &[(i64, u64)], n_scale: u64, n: u64, phi: &TestFunction) -> f64 {
    let h = 1.0 / (n_scale as f64).sqrt();
    let offsets: Vec<i64> = (0..=n).map(|k| 2 * k as i64 - n as i64).collect();
    pairwise_sum_by(initial, &|&(x0, c)| {
        c as f64 / n_scale as f64 * pairwise_sum_by(&offsets, &|&y| phi.eval((x0 + y) as f64 * h) * srw_pmf(n, y))
    })
}

fn moments(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<Checked, RunnerError> {
    let rc = particle_config(cfg)?;
    let phis = phis(cfg);
    let n_scale = rc.env.scale_n();
    let levels = cfg.moments.as_ref().map(|m| m.levels.clone()).unwrap_or_default();
    let pair_mode = rc.tagged && rc.initial.len() == 1 && rc.initial[0].1 == 2;
    let samples = map_replicas(rc.replicas, workers, |r| {
        let mut sup = 0u64;
        let last = simulate_replica(&rc, r, |f, _| sup = sup.max(f.total_mass())).map_err(replica_error(r))?;
        let values: Vec<f64> = phis.iter().map(|phi| measure_apply(&last, n_scale, phi)).collect();
        let product = last.tag_masses().map(|m| m.iter().map(|&b| b as f64).product::<f64>());
        Ok((values, sup as f64 / n_scale as f64, product))
    })
    .into_iter()
    .collect::<Result<Vec<_>, RunnerError>>()?;

    let mut checks = Vec::new();
    let mut results = Vec::new();
    for (k, phi) in phis.iter().enumerate() {
        let xs: Vec<f64> = samples.iter().map(|s| s.0[k]).collect();
        let est = Estimate::from_samples(&xs);
        let exact = mean_measure_from(&rc.initial, n_scale, rc.horizon_steps, phi);
        let z = est.z_against(exact, 0.0);
        checks.push(Check::new(
            format!("mean-measure[{}]", phi.id()),
            z.abs() <= 3.0,
            Some(z),
            format!("MC {:.6} +- {:.6}, exact {exact:.6}", est.mean, est.se),
        ));
        results.push(json!({ "phi": phi.id(), "mc": est, "exact": exact }));
    }
    let x0_mass = rc.initial.iter().map(|&(_, c)| c as f64).sum::<f64>() / n_scale as f64;
    let mut markov = Vec::new();
    for &a in &levels {
        let hits: Vec<f64> = samples.iter().map(|s| if s.1 >= a { 1.0 } else { 0.0 }).collect();
        let est = Estimate::from_samples(&hits);
        let bound = x0_mass / a;
        checks.push(Check::new(
            format!("maximal-inequality[a={a}]"),
            est.mean <= bound + 3.0 * est.se,
            None,
            format!("P(sup X(1) >= a) = {:.5} +- {:.5}, bound {bound:.5}", est.mean, est.se),
        ));
        markov.push(json!({ "a": a, "probability": est, "bound": bound }));
    }
    let mut pair = Value::Null;
    if pair_mode {
        let prods: Vec<f64> = samples.iter().filter_map(|s| s.2).collect();
        let est = Estimate::from_samples(&prods);
        let lambda = rc.env.beta().powi(2) / (n_scale as f64).sqrt();
        let exact = pair_moment_exact(rc.horizon_steps, lambda).map_err(runtime)?;
        let arrival = collision_functional_pair(rc.horizon_steps, lambda).map_err(runtime)?;
        let z = est.z_against(exact, 0.0);
        checks.push(Check::new(
            "pair-moment",
            z.abs() <= 3.0,
            Some(z),
            format!(
                "E[B1 B2] = {:.5} +- {:.5}, exact {exact:.5} (collisions at departure times; arrival-time functional {arrival:.5})",
                est.mean, est.se
            ),
        ));
        pair = json!({ "mc": est, "exact": exact, "arrival_functional": arrival, "lambda": lambda });
    }
    Ok((checks, json!({ "mean_measure": results, "maximal_inequality": markov, "pair_moment": pair })))
}

fn identity_check(cfg: &ExperimentConfig, out: &Out, workers: Option<usize>) -> Result<Checked, RunnerError> {
    let rc = particle_config(cfg)?;
    if !rc.env.is_example() {
        return Err(runtime("identity-check needs the example law"));
    }
    let phis = phis(cfg);
    let (n_scale, beta) = (rc.env.scale_n(), rc.env.beta());
    let want_ledger = cfg.outputs.ledger;
    let per_replica = map_replicas(rc.replicas, workers, |r| {
        let init = rc.initial_field().map_err(replica_error(r))?;
        let mut ledgers: Vec<MartingaleLedger> =
            phis.iter().map(|phi| MartingaleLedger::new(phi.clone(), n_scale, beta, &init)).collect();
        let mut rows: Vec<Vec<u8>> = vec![Vec::new(); phis.len()];
        let mut prev = init;
        let mut failure = None;
        simulate_replica(&rc, r, |f, rec| {
            let Some(rec) = rec else { return };
            for (k, l) in ledgers.iter_mut().enumerate() {
                if let Err(e) = l.update(&prev, rec, f) {
                    failure.get_or_insert(RunnerError::Replica { replica: r, message: format!("step {}: {e}", rec.step_n) });
                }
                if want_ledger {
                    write_ledger_row(&mut rows[k], r, &l.row()).expect("write to memory");
                }
            }
            prev = f.clone();
        })
        .map_err(replica_error(r))?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok((ledgers, rows))
    })
    .into_iter()
    .collect::<Result<Vec<_>, RunnerError>>()?;

    let mut checks = Vec::new();
    let mut results = Vec::new();
    for (k, phi) in phis.iter().enumerate() {
        let ledgers: Vec<&MartingaleLedger> = per_replica.iter().map(|p| &p.0[k]).collect();
        let max_residual = ledgers.iter().map(|l| l.max_residual).fold(0.0, f64::max);
        checks.push(Check::new(
            format!("decomposition[{}]", phi.id()),
            max_residual <= IDENTITY_TOLERANCE,
            None,
            format!("max relative residual {max_residual:.3e}"),
        ));
        let mut entry = json!({ "phi": phi.id(), "max_residual": max_residual });
        if ledgers.len() >= 2 {
            let iso_b: Vec<f64> = ledgers.iter().map(|l| l.mb * l.mb - l.bracket_b).collect();
            let iso_e: Vec<f64> = ledgers.iter().map(|l| l.me * l.me - l.bracket_e).collect();
            let cross: Vec<f64> = ledgers.iter().map(|l| l.mb * l.me).collect();
            for (name, xs) in [("isometry-b", &iso_b), ("isometry-e", &iso_e), ("orthogonality", &cross)] {
                let est = Estimate::from_samples(xs);
                let z = est.z_against(0.0, 0.0);
                checks.push(Check::new(
                    format!("{name}[{}]", phi.id()),
                    z.abs() <= 3.0,
                    Some(z),
                    format!("mean {:.4e} +- {:.4e} (expected 0)", est.mean, est.se),
                ));
                entry[name] = json!(est);
            }
        }
        results.push(entry);
        if want_ledger {
            out.csv(
                &format!("ledger_{k}.csv"),
                LEDGER_HEADER,
                per_replica.iter().map(|p| String::from_utf8_lossy(&p.1[k]).into_owned()),
            )?;
        }
    }
    Ok((checks, json!({ "phi": results })))
}

fn spde_parts(block: &SpdeBlock) -> Result<(SpdeGrid, SpdeParams), RunnerError> {
    let grid = SpdeGrid::new(block.x_min, block.x_max, block.h, block.tau, block.boundary).map_err(runtime)?;
    let mut params = SpdeParams::new(block.gamma, block.beta, block.t_end, block.noise_seed).map_err(runtime)?;
    params.dual_noise = block.dual_noise;
    params.validate().map_err(runtime)?;
    Ok((grid, params))
}

fn spde_initial(block: &SpdeBlock, grid: &SpdeGrid) -> SpdeGrid {
    let spec = block.initial.clone().unwrap_or(PhiSpec::Gaussian { center: 0.0, variance: 0.25, scale: 1.0 });
    grid.clone().sample(&spec.build())
}

fn spde(cfg: &ExperimentConfig, out: &Out, workers: Option<usize>) -> Result<Checked, RunnerError> {
    let block = cfg.spde.as_ref().ok_or_else(|| runtime("spde block is required"))?;
    let (grid, params) = spde_parts(block)?;
    let initial = spde_initial(block, &grid);
    let want_grids = cfg.outputs.grids;
    let finals = map_replicas(block.replicas, workers, |r| {
        let mut rng = replica_rng(params.noise_seed, Stream::SpdeForward, r);
        solve_forward(&initial, &params, &mut rng).map_err(|e| RunnerError::Replica { replica: r, message: e.to_string() })
    })
    .into_iter()
    .collect::<Result<Vec<_>, RunnerError>>()?;

    let mut checks = Vec::new();
    let nonneg = finals.iter().all(|g| g.values().iter().all(|&u| u.is_finite() && u >= 0.0));
    checks.push(Check::new("nonnegative", nonneg, None, "all cells finite and >= 0"));
    let m0 = initial.mass();
    let masses: Vec<f64> = finals.iter().map(SpdeGrid::mass).collect();
    let est = Estimate::from_samples(&masses);
    let z = est.z_against(m0, 0.0);
    let slack = 0.01 * m0;
    checks.push(Check::new(
        "mass",
        est.within(m0, 3.0, slack),
        Some(z),
        format!("E[mass] = {:.6} +- {:.6}, initial {m0:.6}, clipping allowance {slack:.2e}", est.mean, est.se),
    ));
    let mut heat = Value::Null;
    if let (0.0, 0.0, Some(PhiSpec::Gaussian { center, variance, scale })) =
        (params.gamma, params.beta, block.initial.as_ref())
    {
        let g = &finals[0];
        let (mut err, mut peak) = (0.0f64, 0.0f64);
        for (i, &u) in g.values().iter().enumerate() {
            let exact = scale * heat_kernel(*center, variance + params.t_end, g.x_at(i));
            err = err.max((u - exact).abs());
            peak = peak.max(exact.abs());
        }
        let rel = err / peak;
        checks.push(Check::new("heat-oracle", rel <= 0.01, None, format!("relative sup error {rel:.3e}")));
        heat = json!({ "relative_sup_error": rel });
    }
    if want_grids {
        let rows = finals.iter().enumerate().map(|(r, g)| {
            let mut buf = Vec::new();
            write_grid_rows(&mut buf, r as u64, 0.0, &initial).expect("write to memory");
            write_grid_rows(&mut buf, r as u64, params.t_end, g).expect("write to memory");
            String::from_utf8_lossy(&buf).into_owned()
        });
        out.csv("grids.csv", GRID_HEADER, rows)?;
    }
    Ok((checks, json!({ "mass": est, "initial_mass": m0, "heat_oracle": heat })))
}

fn duality(cfg: &ExperimentConfig, out: &Out, workers: Option<usize>) -> Result<Checked, RunnerError> {
    let d = cfg.duality.as_ref().ok_or_else(|| runtime("duality block is required"))?;
    let block = cfg.spde.as_ref().ok_or_else(|| runtime("spde block is required"))?;
    let (grid, base) = spde_parts(block)?;
    let params = SpdeParams { t_end: d.t, ..base };
    let (source, x0) = match d.source {
        DualitySource::Particles => {
            let rc = particle_config(cfg)?;
            let n = rc.env.scale_n() as f64;
            let atoms = rc.initial.iter().map(|&(x, c)| (x as f64 / n.sqrt(), c as f64 / n)).collect();
            (ForwardSource::Particles(rc), InitialMeasure::Atoms(atoms))
        }
        DualitySource::Spde => {
            let initial = spde_initial(block, &grid);
            (ForwardSource::Spde { initial: initial.clone(), params }, InitialMeasure::Density(initial))
        }
    };
    let mut checks = Vec::new();
    let mut reports = Vec::new();
    for (k, phi) in phis(cfg).iter().enumerate() {
        let started = Instant::now();
        let lhs = forward_laplace_samples(&source, phi, d.t, d.forward_replicas, workers).map_err(runtime)?;
        let rhs = dual_laplace_samples(&x0, phi, &grid, &params, d.dual_replicas, workers).map_err(runtime)?;
        let mut report = DualityReport::new(
            phi.id(),
            Estimate::from_samples(&lhs),
            Estimate::from_samples(&rhs),
            d.budget,
        );
        report.runtime_secs = started.elapsed().as_secs_f64();
        eprintln!("duality[{}] took {:.2} s", phi.id(), report.runtime_secs);
        checks.push(Check::new(
            format!("duality[{}]", phi.id()),
            report.passed(),
            Some(report.z),
            format!(
                "lhs {:.5} +- {:.5}, rhs {:.5} +- {:.5}, budget {}",
                report.lhs_mean, report.lhs_se, report.rhs_mean, report.rhs_se, report.discretization_budget
            ),
        ));
        if cfg.outputs.per_replica {
            let rows = lhs
                .iter()
                .enumerate()
                .map(|(r, v)| format!("lhs,{r},{v}\n"))
                .chain(rhs.iter().enumerate().map(|(r, v)| format!("rhs,{r},{v}\n")));
            out.csv(&format!("duality_{k}.csv"), "side,replica,value", rows)?;
        }
        reports.push(report);
    }
    Ok((checks, json!({ "reports": reports })))
}

fn audit(cfg: &ExperimentConfig, out: &Out) -> Result<Checked, RunnerError> {
    let custom = cfg.env.as_ref().filter(|e| e.law != LawBlock::Example);
    let (rows, violations) = match custom {
        Some(block) => {
            let row = audit_env(&build_env(block).map_err(runtime)?);
            let mut v = Vec::new();
            if (row.mean_m1 - 1.0).abs() > 1e-12 {
                v.push(format!("E[m1] = {} != 1", row.mean_m1));
            }
            (vec![row], v)
        }
        None => {
            let a = cfg.audit.as_ref().ok_or_else(|| runtime("audit block is required"))?;
            let report = audit_assumption_a(&a.betas, &a.ns).map_err(runtime)?;
            (report.rows, report.violations)
        }
    };
    let mut checks: Vec<Check> = rows
        .iter()
        .map(|r| {
            let tag = format!("beta={} N={}", r.beta, r.n);
            let ok = !violations.iter().any(|v| v.starts_with(&tag)) && (custom.is_none() || violations.is_empty());
            Check::new(
                format!("audit[{tag}]"),
                ok,
                None,
                format!("E[m1]={:.12} gamma={:.12} beta2-row={:.12}", r.mean_m1, r.gamma_row, r.beta2_row),
            )
        })
        .collect();
    if checks.is_empty() {
        checks.push(Check::new("audit", false, None, "no rows"));
    }
    out.csv(
        "audit.csv",
        "beta,N,mean_m1,gamma_row,beta2_row,mean_m4,fourth_row",
        rows.iter().map(|r| {
            format!("{},{},{},{},{},{},{}\n", r.beta, r.n, r.mean_m1, r.gamma_row, r.beta2_row, r.mean_m4, r.fourth_row)
        }),
    )?;
    Ok((checks, json!({ "rows": rows, "violations": violations })))
}
