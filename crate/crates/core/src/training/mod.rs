//! On-policy optimization and the three-phase inverse attention pipeline.
//!
//! Phase 1 trains attention policies with PPO while logging `(weights,
//! observation)` pairs, phase 2 fits an inverse attention network offline on
//! the newest tenth of those pairs, and phase 3 continues PPO on the composed
//! inverse-attention policy with the inverse network frozen.

mod phases;
mod ppo;
mod rollout;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::agents::IwInput;
use crate::engine::RawObservation;
use crate::error::{Error, Result};
use crate::gradfield::GoalSet;
use crate::par::Execution;

pub use phases::{
    compose_learners, iw_fit, phase1, phase2, phase3, IwFit, IwReport, Phase1Output, PhaseOutcome,
    PhaseRun, TrainSetup,
};
pub use ppo::{ppo_update, surrogate_terms, PpoSample, PpoStats, SurrogateTerms};
pub use rollout::{collect_rollout, EnvPool, Learners, RolloutBuffer, StepRecord};

/// Offline inverse-network fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IwTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for IwTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            patience: 100,
            max_epochs: 3000,
            seed: 0,
        }
    }
}

impl IwTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config(
                "iw needs lr > 0, batch_size > 0 and max_epochs > 0",
            ));
        }
        Ok(())
    }
}

/// PPO and pipeline settings. Step budgets count environment transitions
/// summed over all parallel worlds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub critic_lr: f64,
    /// Orthogonal-init gain of the actor's output layer.
    pub gain: f64,
    pub ppo_epochs: usize,
    /// One bundle per role instead of one per agent.
    pub share_policy: bool,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub num_envs: usize,
    pub rollout_steps: usize,
    pub minibatches: usize,
    pub phase1_steps: usize,
    pub phase3_steps: usize,
    /// Rollouts per convergence window; 0 runs every phase to its budget.
    pub convergence_window: usize,
    pub convergence_threshold: f64,
    /// Pair ring capacity per agent; `None` derives it from the phase-1 budget.
    pub pair_capacity: Option<usize>,
    pub seed: u64,
    pub execution: Execution,
    pub iw: IwTrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 7e-4,
            critic_lr: 7e-4,
            gain: 0.01,
            ppo_epochs: 10,
            share_policy: false,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            max_grad_norm: 10.0,
            num_envs: 8,
            rollout_steps: 200,
            minibatches: 2,
            phase1_steps: 300_000,
            phase3_steps: 300_000,
            convergence_window: 0,
            convergence_threshold: 0.01,
            pair_capacity: None,
            seed: 0,
            execution: Execution::Parallel,
            iw: IwTrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("gae_lambda must lie in [0, 1]"));
        }
        if !(self.clip_eps > 0.0) {
            return Err(Error::config("clip_eps must be positive"));
        }
        if !(self.lr > 0.0 && self.critic_lr > 0.0 && self.gain > 0.0) {
            return Err(Error::config("lr, critic_lr and gain must be positive"));
        }
        if !(self.max_grad_norm > 0.0) || self.entropy_coef < 0.0 {
            return Err(Error::config(
                "max_grad_norm must be positive and entropy_coef non-negative",
            ));
        }
        if self.ppo_epochs == 0 || self.num_envs == 0 || self.rollout_steps == 0 {
            return Err(Error::config(
                "ppo_epochs, num_envs and rollout_steps must be positive",
            ));
        }
        if self.minibatches == 0 || self.minibatches > self.num_envs * self.rollout_steps {
            return Err(Error::config(
                "minibatches must be between 1 and num_envs * rollout_steps",
            ));
        }
        if self.phase1_steps == 0 || self.phase3_steps == 0 {
            return Err(Error::config("phase step budgets must be positive"));
        }
        self.iw.validate()
    }

    /// Transitions gathered per world and rollout.
    pub fn steps_per_rollout(&self) -> usize {
        self.num_envs * self.rollout_steps
    }
}

/// Generalized advantage estimates. `values` carries one extra bootstrap
/// entry; a `done` at step `t` cuts the dependence on `t + 1`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(Error::contract(format!(
            "gae needs {n} rewards, {} values and {n} dones; got {} values and {} dones",
            n + 1,
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Plateau test over a reward history: compares the mean of the last `window`
/// points with the window before it. Needs `2 * window` points.
pub fn convergence_check(history: &[f64], window: usize, threshold: f64) -> bool {
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let last = mean(&history[n - window..]);
    let prev = mean(&history[n - 2 * window..n - window]);
    (last - prev) / prev.abs().max(1e-8) < threshold
}

/// One logged `(weights, observation)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    /// Position in collection order, counted over everything ever pushed.
    pub seq: u64,
    pub agent: usize,
    /// The agent's attention over its slot layout.
    pub weights: Vec<f64>,
    /// Slot features, mask, own state and the action taken at the same step.
    pub input: IwInput,
    pub goals: GoalSet,
    /// The raw observation with teammate history stripped.
    pub raw: RawObservation,
}

/// Collection-ordered pairs, optionally bounded to the newest `capacity`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairDataset {
    entries: VecDeque<PairEntry>,
    capacity: Option<usize>,
    total: u64,
}

impl PairDataset {
    pub fn new(capacity: Option<usize>) -> Self {
        Self {
            entries: VecDeque::new(),
            capacity,
            total: 0,
        }
    }

    /// Appends an entry, assigning its sequence number.
    pub fn push(
        &mut self,
        agent: usize,
        weights: Vec<f64>,
        input: IwInput,
        goals: GoalSet,
        mut raw: RawObservation,
    ) {
        raw.teammate_prev_actions.clear();
        raw.teammate_prev_observations.clear();
        if self.capacity == Some(0) {
            self.total += 1;
            return;
        }
        if self.capacity.is_some_and(|c| self.entries.len() >= c) {
            self.entries.pop_front();
        }
        self.entries.push_back(PairEntry {
            seq: self.total,
            agent,
            weights,
            input,
            goals,
            raw,
        });
        self.total += 1;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Everything ever pushed, including evicted entries.
    pub fn total_collected(&self) -> u64 {
        self.total
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &PairEntry> + DoubleEndedIterator {
        self.entries.iter()
    }

    /// Merges several datasets, keeping each one's order.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a PairDataset>) -> PairDataset {
        let mut out = PairDataset::new(None);
        for p in parts {
            out.entries.extend(p.entries.iter().cloned());
            out.total += p.total;
        }
        out
    }
}

/// Keeps the newest tenth (floored) of everything collected, in collection order.
pub fn trim_dataset(d: &PairDataset) -> PairDataset {
    let keep = ((d.total / 10) as usize).min(d.entries.len());
    let skip = d.entries.len() - keep;
    PairDataset {
        entries: d.entries.iter().skip(skip).cloned().collect(),
        capacity: d.capacity,
        total: d.total,
    }
}

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub update: usize,
    pub step: usize,
    pub episodes: usize,
    /// Mean scoring-mode episode reward per agent, over episodes finished in this rollout.
    pub mean_score: Option<f64>,
    pub role_scores: std::collections::BTreeMap<String, f64>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}
