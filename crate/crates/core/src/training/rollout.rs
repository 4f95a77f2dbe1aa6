use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gae, PairDataset, PpoSample};
use crate::agents::{
    sample_action, AgentObs, BundleMeta, CriticKind, Encoded, Encoder, IwInput, ObsBatch,
    PolicyBundle, Variant, ACTION_DIM,
};
use crate::engine::{make_world, JointAction, Role, ScenarioSpec, Vec2, WorldState};
use crate::error::{Error, Result};
use crate::gradfield::GoalSet;
use crate::par::{self, derive_seed, Execution};

/// The bundles being optimized and which one drives each agent.
#[derive(Clone, Debug)]
pub struct Learners {
    pub bundles: Vec<PolicyBundle>,
    /// Bundle index per agent, in agent order.
    pub assignment: Vec<usize>,
}

impl Learners {
    /// Fresh bundles: one per agent, or one per role when `share_policy` is set.
    pub fn new(
        spec: &ScenarioSpec,
        variant: Variant,
        critic: CriticKind,
        gain: f64,
        share_policy: bool,
        seed: u64,
    ) -> Result<Self> {
        let roles = agent_roles(spec);
        let mut bundles: Vec<PolicyBundle> = Vec::new();
        let mut owners: Vec<Role> = Vec::new();
        let mut assignment = Vec::with_capacity(roles.len());
        for &role in &roles {
            let shared = share_policy
                .then(|| owners.iter().position(|r| *r == role))
                .flatten();
            let k = match shared {
                Some(k) => k,
                None => {
                    let meta = BundleMeta {
                        scenario: spec.kind,
                        n_per_side: spec.n_per_side,
                        role,
                        dims: crate::agents::ObsDims::new(spec, role),
                    };
                    let k = bundles.len();
                    bundles.push(PolicyBundle::with_gain(
                        variant,
                        critic,
                        meta,
                        gain,
                        derive_seed(seed, 100 + k as u64),
                    )?);
                    owners.push(role);
                    k
                }
            };
            assignment.push(k);
        }
        Ok(Self {
            bundles,
            assignment,
        })
    }

    /// Checks that every agent's bundle was built for this scenario and role.
    pub fn validate(&self, spec: &ScenarioSpec) -> Result<()> {
        let roles = agent_roles(spec);
        if self.assignment.len() != roles.len() {
            return Err(Error::config(format!(
                "{} assignments for {} agents",
                self.assignment.len(),
                roles.len()
            )));
        }
        for (a, (&k, &role)) in self.assignment.iter().zip(&roles).enumerate() {
            let b = self
                .bundles
                .get(k)
                .ok_or_else(|| Error::config(format!("agent {a} maps to missing bundle {k}")))?;
            if b.meta.scenario != spec.kind
                || b.meta.role != role
                || b.meta.dims != crate::agents::ObsDims::new(spec, role)
            {
                return Err(Error::config(format!(
                    "bundle {k} ({} {} N={}) cannot drive agent {a} ({} {} N={})",
                    b.meta.scenario.name(),
                    b.meta.role.name(),
                    b.meta.n_per_side,
                    spec.kind.name(),
                    role.name(),
                    spec.n_per_side
                )));
            }
        }
        Ok(())
    }

    /// Agents driven by bundle `k`.
    pub fn agents_of(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&a| self.assignment[a] == k)
            .collect()
    }
}

pub(crate) fn agent_roles(spec: &ScenarioSpec) -> Vec<Role> {
    spec.layout()
        .into_iter()
        .filter(|r| !r.is_static())
        .collect()
}

/// Parallel worlds with their own action streams and episode counters.
#[derive(Clone, Debug)]
pub struct EnvPool {
    pub encoder: Encoder,
    pub worlds: Vec<WorldState>,
    rngs: Vec<ChaCha8Rng>,
    episodes: Vec<u64>,
    running: Vec<Vec<f64>>,
    seed: u64,
    exec: Execution,
}

impl EnvPool {
    pub fn new(encoder: Encoder, num_envs: usize, seed: u64, exec: Execution) -> Result<Self> {
        if num_envs == 0 {
            return Err(Error::config("need at least one world"));
        }
        let spec = encoder.spec.clone();
        let n = spec.num_agents();
        let worlds = (0..num_envs)
            .map(|w| make_world(&spec, derive_seed(derive_seed(seed, w as u64), 0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder,
            worlds,
            rngs: (0..num_envs)
                .map(|w| ChaCha8Rng::seed_from_u64(derive_seed(!seed, w as u64)))
                .collect(),
            episodes: vec![0; num_envs],
            running: vec![vec![0.0; n]; num_envs],
            seed,
            exec,
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.encoder.spec
    }

    pub fn num_envs(&self) -> usize {
        self.worlds.len()
    }

    fn reset(&mut self, w: usize) -> Result<()> {
        self.episodes[w] += 1;
        let seed = derive_seed(derive_seed(self.seed, w as u64), self.episodes[w]);
        self.worlds[w] = make_world(&self.encoder.spec, seed)?;
        self.running[w].iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }

    /// Encodes every agent in every world and runs each bundle once over its agents.
    fn forward(&self, learners: &Learners) -> Result<Forward> {
        let n = self.spec().num_agents();
        let mates: Vec<bool> = learners
            .assignment
            .iter()
            .map(|&k| learners.bundles[k].variant == Variant::InverseAtt)
            .collect();
        let encoded = par::map_indexed(self.exec, self.worlds.len(), |w| {
            (0..n)
                .map(|a| self.encoder.encode(&self.worlds[w], a, mates[a]))
                .collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut encoded: Vec<Encoded> = encoded.into_iter().flatten().collect();
        let cells = encoded.len();
        let mut means = vec![[0.0; ACTION_DIM]; cells];
        let mut weights = vec![None; cells];
        let mut values = vec![0.0; cells];
        for (k, bundle) in learners.bundles.iter().enumerate() {
            let idx: Vec<usize> = (0..cells)
                .filter(|&c| learners.assignment[c % n] == k)
                .collect();
            if idx.is_empty() {
                continue;
            }
            if bundle.variant == Variant::InverseAtt {
                let mut obs: Vec<AgentObs> = idx.iter().map(|&c| encoded[c].obs.clone()).collect();
                let ms: Vec<_> = idx.iter().map(|&c| encoded[c].teammates.clone()).collect();
                bundle.infer_teammates(&mut obs, &ms)?;
                for (&c, o) in idx.iter().zip(obs) {
                    encoded[c].obs = o;
                }
            }
            let refs: Vec<&AgentObs> = idx.iter().map(|&c| &encoded[c].obs).collect();
            let batch = ObsBatch::new(&refs)?;
            let out = bundle.policy(&batch)?;
            let vals = bundle.values(&batch)?;
            for (r, &c) in idx.iter().enumerate() {
                means[c] = [out.means[[r, 0]], out.means[[r, 1]]];
                weights[c] = out.own_weights.as_ref().map(|w| w.row(r).to_vec());
                values[c] = vals[r];
            }
        }
        Ok(Forward {
            encoded,
            means,
            weights,
            values,
        })
    }
}

struct Forward {
    encoded: Vec<Encoded>,
    means: Vec<[f64; ACTION_DIM]>,
    weights: Vec<Option<Vec<f64>>>,
    values: Vec<f64>,
}

/// One agent's transition.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub obs: AgentObs,
    pub goals: GoalSet,
    /// Unclamped Gaussian draw.
    pub action: [f64; ACTION_DIM],
    /// Force actually applied.
    pub applied: Vec2,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub score: f64,
    pub done: bool,
    /// The agent's own attention, for attention variants.
    pub weights: Option<Vec<f64>>,
    pub teammate_actions: Vec<(usize, Vec2)>,
}

#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub num_agents: usize,
    pub steps: usize,
    /// `records[w * num_agents + a]` is agent `a`'s trajectory in world `w`.
    pub records: Vec<Vec<StepRecord>>,
    /// Value of the state after the last step, per trajectory.
    pub bootstrap: Vec<f64>,
    /// Per-agent scoring totals of every episode that ended in this rollout.
    pub episode_scores: Vec<Vec<f64>>,
}

impl RolloutBuffer {
    pub fn trajectory(&self, world: usize, agent: usize) -> &[StepRecord] {
        &self.records[world * self.num_agents + agent]
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.len() != self.num_envs * self.num_agents
            || self.bootstrap.len() != self.records.len()
        {
            return Err(Error::contract("rollout buffer shape mismatch"));
        }
        for t in &self.records {
            if t.len() != self.steps {
                return Err(Error::contract("rollout trajectories differ in length"));
            }
            if t.iter()
                .any(|r| !r.value.is_finite() || !r.log_prob.is_finite())
            {
                return Err(Error::Training("non-finite value in rollout".into()));
            }
        }
        Ok(())
    }

    /// GAE-annotated samples for the given agents across all worlds.
    pub fn samples_for(&self, agents: &[usize], gamma: f64, lambda: f64) -> Result<Vec<PpoSample>> {
        let mut out = Vec::with_capacity(agents.len() * self.num_envs * self.steps);
        for w in 0..self.num_envs {
            for &a in agents {
                let c = w * self.num_agents + a;
                let t = &self.records[c];
                let rewards: Vec<f64> = t.iter().map(|r| r.reward).collect();
                let dones: Vec<bool> = t.iter().map(|r| r.done).collect();
                let mut values: Vec<f64> = t.iter().map(|r| r.value).collect();
                values.push(self.bootstrap[c]);
                let (adv, ret) = gae(&rewards, &values, &dones, gamma, lambda)?;
                for ((r, a), g) in t.iter().zip(adv).zip(ret) {
                    out.push(PpoSample {
                        obs: r.obs.clone(),
                        action: r.action,
                        log_prob: r.log_prob,
                        advantage: a,
                        ret: g,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// Runs `steps` stochastic steps in every world. Worlds that finish an
/// episode are reset in place. When `pairs` is given (one dataset per agent),
/// every self-attention agent's weights and view are logged each step.
pub fn collect_rollout(
    pool: &mut EnvPool,
    learners: &Learners,
    steps: usize,
    mut pairs: Option<&mut [PairDataset]>,
) -> Result<RolloutBuffer> {
    learners.validate(pool.spec())?;
    let n = pool.spec().num_agents();
    if let Some(p) = &pairs {
        if p.len() != n {
            return Err(Error::contract(format!(
                "{} pair datasets for {n} agents",
                p.len()
            )));
        }
    }
    let envs = pool.num_envs();
    let mut records: Vec<Vec<StepRecord>> =
        (0..envs * n).map(|_| Vec::with_capacity(steps)).collect();
    let mut episode_scores = Vec::new();
    for _ in 0..steps {
        let fwd = pool.forward(learners)?;
        let mut draws = Vec::with_capacity(envs * n);
        let mut joint = Vec::with_capacity(envs);
        for w in 0..envs {
            let mut forces = Vec::with_capacity(n);
            for a in 0..n {
                let c = w * n + a;
                let ls = learners.bundles[learners.assignment[a]].log_std();
                let (force, raw, lp) = sample_action(fwd.means[c], ls, &mut pool.rngs[w], true);
                forces.push(force);
                draws.push((force, raw, lp));
            }
            joint.push(JointAction(forces));
        }
        let outcomes = par::map_mut(pool.exec, &mut pool.worlds, |w, world| {
            world.step(&joint[w])
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let Forward {
            encoded,
            weights,
            values,
            ..
        } = fwd;
        for (c, ((e, w), v)) in encoded.into_iter().zip(weights).zip(values).enumerate() {
            let (wi, a) = (c / n, c % n);
            let out = &outcomes[wi];
            let (applied, raw, lp) = draws[c];
            if let (Some(p), Some(weights)) = (pairs.as_deref_mut(), &w) {
                if learners.bundles[learners.assignment[a]].variant == Variant::SelfAtt {
                    let input = IwInput {
                        slots: e.obs.slots.clone(),
                        mask: e.obs.mask.clone(),
                        self_info: e.obs.self_info,
                        action: applied,
                    };
                    p[a].push(a, weights.clone(), input, e.goals.clone(), e.raw.clone());
                }
            }
            pool.running[wi][a] += out.scoring[a];
            records[c].push(StepRecord {
                obs: e.obs,
                goals: e.goals,
                action: raw,
                applied,
                log_prob: lp,
                value: v,
                reward: out.training[a],
                score: out.scoring[a],
                done: out.done,
                weights: w,
                teammate_actions: e.raw.teammate_prev_actions,
            });
        }
        for (w, out) in outcomes.iter().enumerate() {
            if out.done {
                episode_scores.push(pool.running[w].clone());
                pool.reset(w)?;
            }
        }
    }
    let bootstrap = pool.forward(learners)?.values;
    let buffer = RolloutBuffer {
        num_envs: envs,
        num_agents: n,
        steps,
        records,
        bootstrap,
        episode_scores,
    };
    buffer.validate()?;
    Ok(buffer)
}
