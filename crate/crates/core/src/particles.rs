//! Site-aggregated simulator for the branching random walk.
//!
//! Particles at one `(n, x)` are exchangeable: they see the same sign
//! `xi(n, x)` and move independently. One step therefore needs only
//!
//! * `parents_left ~ Binomial(B_{n,x}, 1/2)` movers to `x - 1`, the rest to `x + 1`;
//! * for the Example law, `children_left = 2 * Binomial(parents_left, q(2))`
//!   and likewise on the right.
//!
//! Offspring use the environment of the departure site and are placed at the
//! arrival site. Non-binary laws fall back to one inverse-CDF draw per parent.

use std::io::{self, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::map_replicas;
use crate::env::EnvSpec;
use crate::rng::{derive_seed, replica_rng, Stream};

/// Largest admissible site count.
pub const MAX_COUNT: u64 = i64::MAX as u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("site count overflow at step {step}, site {site}")]
    Overflow { step: u64, site: i64 },
    #[error("negative or invalid initial count at site {0}")]
    BadInitial(i64),
}

/// Sparse occupancy `x -> B_{n,x}` at one lattice time.
///
/// `counts` is sorted by site and holds no zero entries. When origin tags are
/// enabled, `tags[i]` is the occupancy of the descendants of initial particle
/// `i`, and the tag parts sum to `counts` site by site.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParticleField {
    pub step_n: u64,
    counts: Vec<(i64, u64)>,
    tags: Option<Vec<Vec<(i64, u64)>>>,
}

impl ParticleField {
    pub fn counts(&self) -> &[(i64, u64)] {
        &self.counts
    }

    pub fn tags(&self) -> Option<&[Vec<(i64, u64)>]> {
        self.tags.as_deref()
    }

    pub fn get(&self, site: i64) -> u64 {
        self.counts.binary_search_by_key(&site, |&(x, _)| x).map_or(0, |i| self.counts[i].1)
    }

    pub fn total_mass(&self) -> u64 {
        self.counts.iter().map(|&(_, c)| c).sum()
    }

    /// Mass carried by each origin tag.
    pub fn tag_masses(&self) -> Option<Vec<u64>> {
        self.tags.as_ref().map(|t| t.iter().map(|part| part.iter().map(|&(_, c)| c).sum()).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn occupied_sites(&self) -> usize {
        self.counts.len()
    }

    /// Every occupied site has the parity of the current step.
    pub fn parity_consistent(&self) -> bool {
        self.counts.iter().all(|&(x, _)| (x - self.step_n as i64).rem_euclid(2) == 0)
    }
}

/// Field at step 0. Duplicate sites are merged and zero counts dropped.
pub fn init_field(initial: &[(i64, u64)]) -> Result<ParticleField, SimError> {
    Ok(ParticleField { step_n: 0, counts: normalise(initial.to_vec(), 0)?, tags: None })
}

/// Field at step 0 where each initial particle carries its own tag.
pub fn init_field_tagged(initial: &[(i64, u64)]) -> Result<ParticleField, SimError> {
    let mut field = init_field(initial)?;
    let mut tags = Vec::new();
    for &(x, c) in &field.counts {
        for _ in 0..c {
            tags.push(vec![(x, 1)]);
        }
    }
    field.tags = Some(tags);
    Ok(field)
}

/// Transition aggregates for one occupied source site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SiteTransition {
    pub site: i64,
    pub count: u64,
    pub xi: i8,
    pub parents_left: u64,
    pub parents_right: u64,
    pub children_left: u64,
    pub children_right: u64,
}

/// Sufficient statistic of one transition `n -> n + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StepRecord {
    pub step_n: u64,
    /// Whether offspring were drawn from the binary Example law.
    pub example_law: bool,
    pub entries: Vec<SiteTransition>,
}

fn normalise(mut v: Vec<(i64, u64)>, step: u64) -> Result<Vec<(i64, u64)>, SimError> {
    if !v.windows(2).all(|w| w[0].0 <= w[1].0) {
        v.sort_unstable_by_key(|&(x, _)| x);
    }
    let mut out: Vec<(i64, u64)> = Vec::with_capacity(v.len());
    for (x, c) in v {
        if c == 0 {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.0 == x => {
                last.1 = last
                    .1
                    .checked_add(c)
                    .filter(|&s| s <= MAX_COUNT)
                    .ok_or(SimError::Overflow { step, site: x })?;
            }
            _ => {
                if c > MAX_COUNT {
                    return Err(SimError::Overflow { step, site: x });
                }
                out.push((x, c));
            }
        }
    }
    Ok(out)
}

#[inline]
fn binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    // n > 0 and 0 < p < 1 always construct
    Binomial::new(n, p).map_or(0, |b| b.sample(rng))
}

fn offspring<R: Rng + ?Sized>(
    env: &EnvSpec,
    xi: i8,
    parents: u64,
    rng: &mut R,
    step: u64,
    site: i64,
) -> Result<u64, SimError> {
    if env.is_example() {
        let k = binomial(rng, parents, env.branch_probability(xi));
        return k.checked_mul(2).ok_or(SimError::Overflow { step, site });
    }
    let law = env.law_for_sign(xi);
    let mut total = 0u64;
    for _ in 0..parents {
        total = total.checked_add(law.quantile(rng.random())).ok_or(SimError::Overflow { step, site })?;
    }
    Ok(total)
}

fn step_counts<R: Rng + ?Sized>(
    counts: &[(i64, u64)],
    step_n: u64,
    env: &EnvSpec,
    rng: &mut R,
    entries: &mut Vec<SiteTransition>,
) -> Result<Vec<(i64, u64)>, SimError> {
    let mut next = Vec::with_capacity(2 * counts.len());
    for &(x, count) in counts {
        let xi = env.sample_xi(step_n, x);
        let parents_left = binomial(rng, count, 0.5);
        let parents_right = count - parents_left;
        let children_left = offspring(env, xi, parents_left, rng, step_n, x)?;
        let children_right = offspring(env, xi, parents_right, rng, step_n, x)?;
        next.push((x - 1, children_left));
        next.push((x + 1, children_right));
        entries.push(SiteTransition { site: x, count, xi, parents_left, parents_right, children_left, children_right });
    }
    normalise(next, step_n + 1)
}

fn merge_entries(mut entries: Vec<SiteTransition>) -> Vec<SiteTransition> {
    entries.sort_by_key(|e| e.site);
    let mut out: Vec<SiteTransition> = Vec::with_capacity(entries.len());
    for e in entries {
        match out.last_mut() {
            Some(last) if last.site == e.site => {
                last.count += e.count;
                last.parents_left += e.parents_left;
                last.parents_right += e.parents_right;
                last.children_left += e.children_left;
                last.children_right += e.children_right;
            }
            _ => out.push(e),
        }
    }
    out
}

/// One lattice step `n -> n + 1`.
pub fn step<R: Rng + ?Sized>(
    field: &ParticleField,
    env: &EnvSpec,
    rng: &mut R,
) -> Result<(ParticleField, StepRecord), SimError> {
    let n = field.step_n;
    let mut entries = Vec::with_capacity(field.counts.len());
    let (counts, tags) = match &field.tags {
        None => (step_counts(&field.counts, n, env, rng, &mut entries)?, None),
        Some(parts) => {
            let mut new_parts = Vec::with_capacity(parts.len());
            for part in parts {
                new_parts.push(step_counts(part, n, env, rng, &mut entries)?);
            }
            let all: Vec<(i64, u64)> = new_parts.iter().flatten().copied().collect();
            entries = merge_entries(entries);
            (normalise(all, n + 1)?, Some(new_parts))
        }
    };
    let record = StepRecord { step_n: n, example_law: env.is_example(), entries };
    Ok((ParticleField { step_n: n + 1, counts, tags }, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvMode {
    /// Fresh environment per replica.
    #[default]
    Annealed,
    /// One environment shared by all replicas.
    Quenched,
}

/// Everything needed to reproduce an ensemble of trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub initial: Vec<(i64, u64)>,
    pub horizon_steps: u64,
    pub replicas: u64,
    pub mode: EnvMode,
    /// Seed of the movement/offspring streams.
    pub seed: u64,
    pub tagged: bool,
}

impl RunConfig {
    /// `count` particles at the origin.
    pub fn at_origin(env: EnvSpec, count: u64, horizon_steps: u64, replicas: u64, seed: u64) -> Self {
        Self { env, initial: vec![(0, count)], horizon_steps, replicas, mode: EnvMode::Annealed, seed, tagged: false }
    }

    /// Initial sites all even, so parity checks apply.
    pub fn even_start(&self) -> bool {
        self.initial.iter().all(|&(x, _)| x.rem_euclid(2) == 0)
    }

    pub fn replica_env(&self, replica: u64) -> EnvSpec {
        match self.mode {
            EnvMode::Annealed => self.env.with_seed(derive_seed(self.env.seed(), replica)),
            EnvMode::Quenched => self.env.clone(),
        }
    }

    pub fn replica_rng(&self, replica: u64) -> ChaCha8Rng {
        replica_rng(self.seed, Stream::Movement, replica)
    }

    pub fn initial_field(&self) -> Result<ParticleField, SimError> {
        if self.tagged {
            init_field_tagged(&self.initial)
        } else {
            init_field(&self.initial)
        }
    }
}

/// Runs one replica, calling `observe(field, None)` on the initial field and
/// `observe(new_field, Some(record))` after every step. The observer sees the
/// field before each step through the previous call.
pub fn simulate_replica<F>(cfg: &RunConfig, replica: u64, mut observe: F) -> Result<ParticleField, SimError>
where
    F: FnMut(&ParticleField, Option<&StepRecord>),
{
    let env = cfg.replica_env(replica);
    let mut rng = cfg.replica_rng(replica);
    let mut field = cfg.initial_field()?;
    observe(&field, None);
    for _ in 0..cfg.horizon_steps {
        if field.is_empty() {
            field.step_n += 1;
            observe(&field, Some(&StepRecord { step_n: field.step_n - 1, example_law: env.is_example(), entries: vec![] }));
            continue;
        }
        let (next, rec) = step(&field, &env, &mut rng)?;
        observe(&next, Some(&rec));
        field = next;
    }
    Ok(field)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub replica: u64,
    pub snapshots: Vec<ParticleField>,
    pub records: Vec<StepRecord>,
}

/// Runs every replica and keeps all snapshots and step records.
pub fn run(cfg: &RunConfig, workers: Option<usize>) -> Result<Vec<Trajectory>, SimError> {
    map_replicas(cfg.replicas, workers, |r| {
        let mut snapshots = Vec::with_capacity(cfg.horizon_steps as usize + 1);
        let mut records = Vec::with_capacity(cfg.horizon_steps as usize);
        simulate_replica(cfg, r, |f, rec| {
            snapshots.push(f.clone());
            if let Some(rec) = rec {
                records.push(rec.clone());
            }
        })?;
        Ok(Trajectory { replica: r, snapshots, records })
    })
    .into_iter()
    .collect()
}

/// Total mass `B_n` of every replica at every step, `[replica][step]`.
pub fn mass_paths(cfg: &RunConfig, workers: Option<usize>) -> Result<Vec<Vec<u64>>, SimError> {
    map_replicas(cfg.replicas, workers, |r| {
        let mut masses = Vec::with_capacity(cfg.horizon_steps as usize + 1);
        simulate_replica(cfg, r, |f, _| masses.push(f.total_mass()))?;
        Ok(masses)
    })
    .into_iter()
    .collect()
}

pub const SNAPSHOT_HEADER: &str = "replica,step,site,count";
pub const STEP_HEADER: &str = "replica,step,site,xi,pl,pr,cl,cr";

pub fn write_snapshot_rows<W: Write>(w: &mut W, replica: u64, field: &ParticleField) -> io::Result<()> {
    for &(x, c) in &field.counts {
        writeln!(w, "{replica},{},{x},{c}", field.step_n)?;
    }
    Ok(())
}

pub fn write_step_rows<W: Write>(w: &mut W, replica: u64, rec: &StepRecord) -> io::Result<()> {
    for e in &rec.entries {
        writeln!(
            w,
            "{replica},{},{},{},{},{},{},{}",
            rec.step_n, e.site, e.xi, e.parents_left, e.parents_right, e.children_left, e.children_right
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::Estimate;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn init_examples() {
        let f = init_field(&[(0, 100)]).unwrap();
        assert_eq!(f.total_mass(), 100);
        assert_eq!(f.get(0), 100);
        assert!(init_field(&[]).unwrap().is_empty());
        let f = init_field(&[(0, 3), (2, 5)]).unwrap();
        assert_eq!(f.total_mass(), 8);
        assert!(f.parity_consistent());
        let f = init_field(&[(2, 5), (0, 3), (2, 1), (4, 0)]).unwrap();
        assert_eq!(f.counts(), &[(0, 3), (2, 6)]);
    }

    #[test]
    fn empty_field_is_absorbing() {
        let env = EnvSpec::example(16, 1.0, 1).unwrap();
        let mut rng = replica_rng(0, Stream::Movement, 0);
        let (next, rec) = step(&ParticleField::default(), &env, &mut rng).unwrap();
        assert!(next.is_empty());
        assert!(rec.entries.is_empty());
        assert_eq!(next.step_n, 1);
    }

    #[test]
    fn record_invariants() {
        let env = EnvSpec::example(16, 1.0, 5).unwrap();
        let mut rng = replica_rng(3, Stream::Movement, 0);
        let mut field = init_field(&[(0, 500), (4, 77)]).unwrap();
        for _ in 0..20 {
            let (next, rec) = step(&field, &env, &mut rng).unwrap();
            let mut arrivals = 0;
            for e in &rec.entries {
                assert_eq!(e.parents_left + e.parents_right, field.get(e.site));
                assert_eq!(e.children_left % 2, 0);
                assert_eq!(e.children_right % 2, 0);
                assert_eq!(e.xi, env.sample_xi(field.step_n, e.site));
                arrivals += e.children_left + e.children_right;
            }
            assert_eq!(arrivals, next.total_mass());
            assert!(next.parity_consistent());
            field = next;
        }
    }

    #[test]
    fn one_step_mean_without_environment() {
        let env = EnvSpec::example(16, 0.0, 0).unwrap();
        let cfg = RunConfig::at_origin(env, 1, 1, 100_000, 11);
        let masses = mass_paths(&cfg, None).unwrap();
        let m: Vec<f64> = masses.iter().map(|p| p[1] as f64).collect();
        let est = Estimate::from_samples(&m);
        assert!(est.within(1.0, 3.0, 0.0), "{est:?}");
        assert!((est.se - (1.0f64 / 1e5).sqrt()).abs() < 2e-4);
    }

    #[test]
    fn one_step_mean_with_positive_sign() {
        // quenched environment whose sign at (0, 0) is +1
        let mut seed = 0;
        let env = loop {
            let e = EnvSpec::example(16, 1.0, seed).unwrap();
            if e.sample_xi(0, 0) == 1 {
                break e;
            }
            seed += 1;
        };
        let mut cfg = RunConfig::at_origin(env, 1, 1, 100_000, 12);
        cfg.mode = EnvMode::Quenched;
        let masses = mass_paths(&cfg, None).unwrap();
        let m: Vec<f64> = masses.iter().map(|p| p[1] as f64).collect();
        let est = Estimate::from_samples(&m);
        assert!(est.within(1.5, 3.0, 0.0), "{est:?}");
    }

    #[test]
    fn horizon_zero_keeps_initial_field() {
        let env = EnvSpec::example(16, 1.0, 0).unwrap();
        let cfg = RunConfig::at_origin(env, 16, 0, 3, 1);
        let traj = run(&cfg, Some(1)).unwrap();
        for t in traj {
            assert_eq!(t.snapshots.len(), 1);
            assert!(t.records.is_empty());
            assert_eq!(t.snapshots[0].counts(), &[(0, 16)]);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let env = EnvSpec::example(64, 1.0, 99).unwrap();
        let cfg = RunConfig::at_origin(env, 64, 40, 2, 5);
        assert_eq!(run(&cfg, Some(1)).unwrap(), run(&cfg, Some(2)).unwrap());
    }

    #[test]
    fn quenched_replicas_share_environment() {
        let env = EnvSpec::example(64, 1.0, 99).unwrap();
        let mut cfg = RunConfig::at_origin(env, 64, 1, 2, 5);
        cfg.mode = EnvMode::Quenched;
        assert_eq!(cfg.replica_env(0), cfg.replica_env(1));
        cfg.mode = EnvMode::Annealed;
        assert_ne!(cfg.replica_env(0).seed(), cfg.replica_env(1).seed());
        // the movement stream does not depend on the mode
        let mut a = cfg.replica_rng(1);
        cfg.mode = EnvMode::Quenched;
        let mut b = cfg.replica_rng(1);
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn custom_law_uses_per_parent_sampling() {
        use crate::env::{LawKind, OffspringLaw};
        let plus = OffspringLaw::new(vec![(0, 0.2), (1, 0.3), (3, 0.5)]).unwrap();
        let minus = OffspringLaw::new(vec![(0, 0.5), (1, 0.5)]).unwrap();
        let env = EnvSpec::new(16, 1.0, 7, LawKind::CustomTable { plus, minus }).unwrap();
        let mut rng = replica_rng(1, Stream::Movement, 0);
        let field = init_field(&[(0, 10_000)]).unwrap();
        let (next, rec) = step(&field, &env, &mut rng).unwrap();
        assert!(!rec.example_law);
        let mean = next.total_mass() as f64 / 1e4;
        let expect = if env.sample_xi(0, 0) > 0 { 1.8 } else { 0.5 };
        assert!((mean - expect).abs() < 0.05, "{mean}");
    }

    #[test]
    fn csv_rows() {
        let f = init_field(&[(0, 3), (2, 5)]).unwrap();
        let mut buf = Vec::new();
        write_snapshot_rows(&mut buf, 7, &f).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "7,0,0,3\n7,0,2,5\n");
    }

    proptest! {
        #[test]
        fn tags_partition_counts(seed in 0u64..1000, beta in 0.0f64..1.9) {
            let env = EnvSpec::example(16, beta, seed).unwrap();
            let mut rng = replica_rng(seed, Stream::Movement, 0);
            let mut field = init_field_tagged(&[(0, 2), (2, 1)]).unwrap();
            for _ in 0..12 {
                let (next, rec) = step(&field, &env, &mut rng).unwrap();
                let parts = next.tags().unwrap();
                let mut merged: Vec<(i64, u64)> = parts.iter().flatten().copied().collect();
                merged = normalise(merged, 0).unwrap();
                prop_assert_eq!(&merged, next.counts());
                for e in &rec.entries {
                    prop_assert_eq!(e.parents_left + e.parents_right, field.get(e.site));
                }
                prop_assert!(next.parity_consistent());
                field = next;
            }
        }
    }
}
