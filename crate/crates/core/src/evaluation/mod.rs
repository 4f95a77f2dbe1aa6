//! Mix-and-match tournaments, rank accuracy, sweeps and partial observation.
//!
//! Every episode's randomness (composition, world reset, random controllers)
//! is derived from the master seed and the episode index alone. Episodes are
//! simulated in lockstep chunks so each pool entry runs one batched forward
//! per step, and chunks run in parallel.

mod sweep;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use sweep::{
    multi_inverse_sweep, partial_obs_eval, PartialObsReport, PartialObsRow, SweepCell, SweepReport,
    SweepScale,
};

use crate::agents::{AgentObs, Encoder, ObsBatch, PolicyBundle, Variant};
use crate::engine::{make_world, JointAction, Role, ScenarioSpec, Vec2, WorldState};
use crate::error::{Error, Result};
use crate::gradfield::GradientFields;
use crate::par::{self, derive_seed, Execution};

const COMPOSITION_STREAM: u64 = 0xC0;
const WORLD_STREAM: u64 = 0x3D;
const RANDOM_STREAM: u64 = 0x5A;

/// What drives an agent slot.
#[derive(Clone, Debug)]
pub enum Controller {
    /// Deterministic (mean) actions of a trained bundle.
    Policy(Arc<PolicyBundle>),
    /// Uniform forces in `[-1, 1]^2`.
    Random,
}

#[derive(Clone, Debug)]
pub struct PoolEntry {
    pub method: String,
    pub role: Role,
    pub seed_id: usize,
    /// Where the controller was loaded from, if anywhere.
    pub source: Option<String>,
    pub controller: Controller,
}

impl PoolEntry {
    pub fn policy(method: &str, seed_id: usize, bundle: PolicyBundle) -> Self {
        Self {
            method: method.to_string(),
            role: bundle.meta.role,
            seed_id,
            source: None,
            controller: Controller::Policy(Arc::new(bundle)),
        }
    }

    pub fn random(role: Role, seed_id: usize) -> Self {
        Self {
            method: "random".into(),
            role,
            seed_id,
            source: None,
            controller: Controller::Random,
        }
    }

    fn bundle(&self) -> Option<&PolicyBundle> {
        match &self.controller {
            Controller::Policy(b) => Some(b),
            Controller::Random => None,
        }
    }
}

/// Candidate agents for mix-and-match play, plus the goal fields they observe with.
#[derive(Clone, Debug)]
pub struct AgentPool {
    pub entries: Vec<PoolEntry>,
    pub fields: GradientFields,
}

impl AgentPool {
    pub fn new(entries: Vec<PoolEntry>, fields: GradientFields) -> Self {
        Self { entries, fields }
    }

    /// Every agent role has an entry and every policy was built for this scenario.
    pub fn validate(&self, spec: &ScenarioSpec) -> Result<()> {
        for e in &self.entries {
            if let Some(b) = e.bundle() {
                let m = &b.meta;
                if m.scenario != spec.kind
                    || m.n_per_side != spec.n_per_side
                    || m.role != e.role
                    || m.dims != crate::agents::ObsDims::new(spec, e.role)
                {
                    return Err(Error::config(format!(
                        "{} seed {} ({} {} N={}) does not fit {} N={}",
                        e.method,
                        e.seed_id,
                        m.scenario.name(),
                        m.role.name(),
                        m.n_per_side,
                        spec.kind.name(),
                        spec.n_per_side
                    )));
                }
            }
        }
        for role in agent_roles(spec) {
            if !self.entries.iter().any(|e| e.role == role) {
                return Err(Error::config(format!(
                    "pool has no entry for role {}",
                    role.name()
                )));
            }
        }
        Ok(())
    }

    /// Distinct method tags available for `role`, sorted.
    pub fn methods(&self, role: Role) -> Vec<&str> {
        let set: BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| e.role == role)
            .map(|e| e.method.as_str())
            .collect();
        set.into_iter().collect()
    }
}

pub(crate) fn agent_roles(spec: &ScenarioSpec) -> Vec<Role> {
    spec.layout()
        .into_iter()
        .filter(|r| !r.is_static())
        .collect()
}

/// Draws one pool entry per agent slot: a method uniformly among those
/// offered for the slot's role, then one of that method's entries uniformly.
pub fn sample_composition<R: Rng + ?Sized>(
    pool: &AgentPool,
    spec: &ScenarioSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    agent_roles(spec)
        .into_iter()
        .map(|role| {
            let methods = pool.methods(role);
            if methods.is_empty() {
                return Err(Error::config(format!(
                    "pool has no entry for role {}",
                    role.name()
                )));
            }
            let m = methods[rng.random_range(0..methods.len())];
            let options: Vec<usize> = (0..pool.entries.len())
                .filter(|&i| pool.entries[i].role == role && pool.entries[i].method == m)
                .collect();
            Ok(options[rng.random_range(0..options.len())])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TournamentConfig {
    pub episodes: usize,
    pub steps: usize,
    pub seed: u64,
    /// Episodes simulated together in one lockstep chunk.
    pub chunk: usize,
    pub execution: Execution,
}

impl Default for TournamentConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            steps: 200,
            seed: 0,
            chunk: 50,
            execution: Execution::Parallel,
        }
    }
}

/// One finished episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Pool entry index per agent slot.
    pub composition: Vec<usize>,
    pub methods: Vec<String>,
    pub roles: Vec<Role>,
    /// Scoring-mode episode total per agent slot.
    pub rewards: Vec<f64>,
    /// Mean number of entities each agent saw per step.
    pub mean_visible: f64,
}

/// Aggregate for one method in one role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub role: Role,
    /// Mean per-agent episode reward over every slot this method filled.
    pub mean: f64,
    pub stderr: f64,
    /// Episode-slots contributing to `mean`.
    pub count: usize,
    /// Mean team total (sum over the role's slots) of the episodes, per slot filled.
    pub team_mean: f64,
    pub team_stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub scenario: String,
    pub n_per_side: usize,
    pub master_seed: u64,
    pub episodes: usize,
    pub steps: usize,
    pub rows: Vec<MethodRow>,
    pub log: Vec<EpisodeRecord>,
}

impl MatchReport {
    pub fn row(&self, method: &str, role: Role) -> Option<&MethodRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.role == role)
    }

    /// Mean number of entities visible to an agent per step.
    pub fn mean_visible(&self) -> f64 {
        mean_stderr(&self.log.iter().map(|e| e.mean_visible).collect::<Vec<_>>()).0
    }

    /// Fixed-width summary table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{} N={} | {} episodes x {} steps | seed {}\n{:<16} {:<8} {:>10} {:>9} {:>7} {:>10} {:>9}\n",
            self.scenario,
            self.n_per_side,
            self.episodes,
            self.steps,
            self.master_seed,
            "method",
            "role",
            "mean",
            "stderr",
            "n",
            "team",
            "stderr"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<16} {:<8} {:>10.3} {:>9.3} {:>7} {:>10.3} {:>9.3}\n",
                r.method,
                r.role.name(),
                r.mean,
                r.stderr,
                r.count,
                r.team_mean,
                r.team_stderr
            ));
        }
        s
    }
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Per-method aggregates rebuilt from an episode log.
pub fn recount(log: &[EpisodeRecord]) -> Vec<MethodRow> {
    let mut by: BTreeMap<(String, Role), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ep in log {
        let mut team: BTreeMap<Role, f64> = BTreeMap::new();
        for (r, role) in ep.rewards.iter().zip(&ep.roles) {
            *team.entry(*role).or_default() += r;
        }
        for ((m, role), r) in ep.methods.iter().zip(&ep.roles).zip(&ep.rewards) {
            let slot = by.entry((m.clone(), *role)).or_default();
            slot.0.push(*r);
            slot.1.push(team[role]);
        }
    }
    by.into_iter()
        .map(|((method, role), (own, team))| {
            let (mean, stderr) = mean_stderr(&own);
            let (team_mean, team_stderr) = mean_stderr(&team);
            MethodRow {
                method,
                role,
                mean,
                stderr,
                count: own.len(),
                team_mean,
                team_stderr,
            }
        })
        .collect()
}

/// Runs the given compositions; `compositions[i]` is episode `first + i`.
pub(crate) fn run_episodes(
    pool: &AgentPool,
    spec: &ScenarioSpec,
    compositions: &[Vec<usize>],
    first: usize,
    config: &TournamentConfig,
) -> Result<Vec<EpisodeRecord>> {
    if config.steps == 0 || config.chunk == 0 {
        return Err(Error::config("tournaments need steps > 0 and chunk > 0"));
    }
    let spec = spec.clone().with_horizon(config.steps);
    spec.validate()?;
    pool.validate(&spec)?;
    let encoder = Encoder::new(&spec, pool.fields.clone());
    let chunks: Vec<(usize, &[Vec<usize>])> = compositions
        .chunks(config.chunk)
        .enumerate()
        .map(|(i, c)| (first + i * config.chunk, c))
        .collect();
    let out = par::map_indexed(config.execution, chunks.len(), |i| {
        let (start, comps) = chunks[i];
        run_chunk(pool, &encoder, comps, start, config)
    });
    let mut records = Vec::with_capacity(compositions.len());
    for r in out {
        records.extend(r?);
    }
    Ok(records)
}

fn run_chunk(
    pool: &AgentPool,
    encoder: &Encoder,
    comps: &[Vec<usize>],
    start: usize,
    config: &TournamentConfig,
) -> Result<Vec<EpisodeRecord>> {
    let spec = &encoder.spec;
    let roles = agent_roles(spec);
    let n = roles.len();
    let mut worlds = comps
        .iter()
        .enumerate()
        .map(|(i, _)| {
            make_world(
                spec,
                derive_seed(config.seed ^ WORLD_STREAM, (start + i) as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rngs: Vec<ChaCha8Rng> = (0..comps.len())
        .map(|i| {
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed ^ RANDOM_STREAM, (start + i) as u64))
        })
        .collect();
    let mut totals = vec![vec![0.0; n]; comps.len()];
    let mut visible = vec![0usize; comps.len()];
    let used: BTreeSet<usize> = comps.iter().flatten().copied().collect();
    for _ in 0..config.steps {
        let mut obs: Vec<Option<AgentObs>> = Vec::with_capacity(comps.len() * n);
        let mut mates = Vec::with_capacity(comps.len() * n);
        for (w, comp) in comps.iter().enumerate() {
            for (a, &k) in comp.iter().enumerate() {
                match pool.entries[k].bundle() {
                    Some(b) => {
                        let inverse = b.variant == Variant::InverseAtt;
                        let e = encoder.encode(&worlds[w], a, inverse)?;
                        visible[w] += e.raw.entities.len();
                        obs.push(Some(e.obs));
                        mates.push(e.teammates);
                    }
                    None => {
                        visible[w] += worlds[w].observe(a)?.entities.len();
                        obs.push(None);
                        mates.push(Vec::new());
                    }
                }
            }
        }
        let mut forces = vec![Vec2::ZERO; comps.len() * n];
        for &k in &used {
            let Some(bundle) = pool.entries[k].bundle() else {
                continue;
            };
            let cells: Vec<usize> = (0..comps.len() * n)
                .filter(|&c| comps[c / n][c % n] == k)
                .collect();
            let mut batch_obs: Vec<AgentObs> = cells
                .iter()
                .map(|&c| obs[c].take().expect("policy cell has an observation"))
                .collect();
            if bundle.variant == Variant::InverseAtt {
                let ms: Vec<_> = cells.iter().map(|&c| mates[c].clone()).collect();
                bundle.infer_teammates(&mut batch_obs, &ms)?;
            }
            let refs: Vec<&AgentObs> = batch_obs.iter().collect();
            let out = bundle.policy(&ObsBatch::new(&refs)?)?;
            for (r, &c) in cells.iter().enumerate() {
                forces[c] = Vec2::new(out.means[[r, 0]], out.means[[r, 1]]).clamp(-1.0, 1.0);
            }
        }
        for (w, comp) in comps.iter().enumerate() {
            for (a, &k) in comp.iter().enumerate() {
                if pool.entries[k].bundle().is_none() {
                    let rng = &mut rngs[w];
                    forces[w * n + a] =
                        Vec2::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
                }
            }
        }
        for (w, world) in worlds.iter_mut().enumerate() {
            if world.is_done() {
                continue;
            }
            let out = world.step(&JointAction(forces[w * n..(w + 1) * n].to_vec()))?;
            for (t, r) in totals[w].iter_mut().zip(&out.scoring) {
                *t += r;
            }
        }
    }
    Ok(comps
        .iter()
        .enumerate()
        .map(|(w, comp)| EpisodeRecord {
            episode: start + w,
            composition: comp.clone(),
            methods: comp
                .iter()
                .map(|&k| pool.entries[k].method.clone())
                .collect(),
            roles: roles.clone(),
            rewards: totals[w].clone(),
            mean_visible: visible[w] as f64 / (config.steps * n) as f64,
        })
        .collect())
}

/// Forces for one world where `lineup[a]` names the pool entry driving agent
/// `a`. `None` slots stay at zero for an external driver.
pub fn lineup_forces<R: Rng + ?Sized>(
    pool: &AgentPool,
    encoder: &Encoder,
    world: &WorldState,
    lineup: &[Option<usize>],
    rng: &mut R,
) -> Result<Vec<Vec2>> {
    if lineup.len() != world.num_agents() {
        return Err(Error::contract(format!(
            "lineup has {} slots for {} agents",
            lineup.len(),
            world.num_agents()
        )));
    }
    let mut forces = vec![Vec2::ZERO; lineup.len()];
    for (a, slot) in lineup.iter().enumerate() {
        let Some(k) = *slot else { continue };
        let entry = pool
            .entries
            .get(k)
            .ok_or_else(|| Error::contract(format!("no pool entry {k}")))?;
        forces[a] = match entry.bundle() {
            Some(b) => {
                let inverse = b.variant == Variant::InverseAtt;
                let e = encoder.encode(world, a, inverse)?;
                let mut obs = vec![e.obs];
                if inverse {
                    b.infer_teammates(&mut obs, &[e.teammates])?;
                }
                let out = b.policy(&ObsBatch::new(&[&obs[0]])?)?;
                Vec2::new(out.means[[0, 0]], out.means[[0, 1]]).clamp(-1.0, 1.0)
            }
            None => Vec2::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)),
        };
    }
    Ok(forces)
}

/// Composition of episode `e` under a master seed.
pub fn episode_composition(
    pool: &AgentPool,
    spec: &ScenarioSpec,
    seed: u64,
    episode: usize,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ COMPOSITION_STREAM, episode as u64));
    sample_composition(pool, spec, &mut rng)
}

/// Mix-and-match evaluation: each episode samples a fresh composition and
/// attributes every slot's scoring reward to that slot's method.
pub fn run_tournament(
    pool: &AgentPool,
    spec: &ScenarioSpec,
    config: &TournamentConfig,
) -> Result<MatchReport> {
    pool.validate(spec)?;
    let comps = (0..config.episodes)
        .map(|e| episode_composition(pool, spec, config.seed, e))
        .collect::<Result<Vec<_>>>()?;
    let log = run_episodes(pool, spec, &comps, 0, config)?;
    Ok(MatchReport {
        scenario: spec.kind.name().to_string(),
        n_per_side: spec.n_per_side,
        master_seed: config.seed,
        episodes: config.episodes,
        steps: config.steps,
        rows: recount(&log),
        log,
    })
}

/// `accuracy[r]`: fraction of samples whose goal at descending rank `r` is the
/// same in `pred` and `truth`. Samples may differ in length; rank `r` is scored
/// over the samples that have more than `r` goals.
pub fn rank_accuracy(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let width = truth.iter().map(Vec::len).max().unwrap_or(0);
    let mut hits = vec![0usize; width];
    let mut seen = vec![0usize; width];
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::contract(format!(
                "prediction over {} goals for a target over {}",
                p.len(),
                t.len()
            )));
        }
        for (r, (a, b)) in ranking(p).into_iter().zip(ranking(t)).enumerate() {
            seen[r] += 1;
            hits[r] += usize::from(a == b);
        }
    }
    Ok(hits
        .into_iter()
        .zip(seen)
        .map(|(h, s)| h as f64 / s.max(1) as f64)
        .collect())
}

/// Goal indices sorted by descending weight; ties go to the lower index.
pub fn ranking(weights: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx
}

#[cfg(test)]
mod tests;
