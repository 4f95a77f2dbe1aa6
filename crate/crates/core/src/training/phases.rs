use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::rollout::agent_roles;
use super::{
    collect_rollout, convergence_check, ppo_update, trim_dataset, EnvPool, IwTrainConfig, Learners,
    MetricsRecord, PairDataset, PairEntry, PpoStats, TrainConfig,
};
use crate::agents::{CriticKind, Encoder, IWNet, IwBatch, IwInput, PolicyBundle, Variant};
use crate::engine::{Role, ScenarioSpec};
use crate::error::{Error, Result};
use crate::evaluation::rank_accuracy;
use crate::gradfield::GradientFields;
use crate::par::derive_seed;
use crate::tensor::{rows, AdamConfig, Matrix, ParamStore, Tape};

/// Scenario, goal fields and architecture of a training run.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub spec: ScenarioSpec,
    pub fields: GradientFields,
    pub variant: Variant,
    pub critic: CriticKind,
}

/// Result of one PPO phase.
#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub learners: Learners,
    /// Mean scoring-mode episode reward per rollout that finished an episode.
    pub history: Vec<f64>,
    pub steps: usize,
    pub updates: usize,
    pub converged: bool,
    /// Set when the budget ran out without the reward improving.
    pub warning: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Phase1Output {
    pub outcome: PhaseOutcome,
    /// Trimmed pair datasets, one per agent (empty for non-attention variants).
    pub datasets: Vec<PairDataset>,
}

/// Options threaded through a PPO phase.
pub struct PhaseRun<'a> {
    pub name: &'a str,
    pub budget: usize,
    pub stream: u64,
    pub sink: &'a mut dyn FnMut(&MetricsRecord),
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn run_phase(
    setup: &TrainSetup,
    config: &TrainConfig,
    learners: &mut Learners,
    mut pairs: Option<&mut [PairDataset]>,
    run: PhaseRun<'_>,
) -> Result<PhaseOutcome> {
    config.validate()?;
    learners.validate(&setup.spec)?;
    let encoder = Encoder::new(&setup.spec, setup.fields.clone());
    let seed = derive_seed(config.seed, run.stream);
    let mut pool = EnvPool::new(encoder, config.num_envs, seed, config.execution)?;
    let roles = agent_roles(&setup.spec);
    let mut history = Vec::new();
    let (mut steps, mut updates, mut converged) = (0, 0, false);
    while steps < run.budget {
        let buffer = collect_rollout(
            &mut pool,
            learners,
            config.rollout_steps,
            pairs.as_deref_mut(),
        )?;
        steps += config.steps_per_rollout();
        let mut total = PpoStats::default();
        for k in 0..learners.bundles.len() {
            let agents = learners.agents_of(k);
            if agents.is_empty() {
                continue;
            }
            let samples = buffer.samples_for(&agents, config.gamma, config.gae_lambda)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (updates * 1024 + k) as u64));
            let s = ppo_update(&mut learners.bundles[k], &samples, config, &mut rng)?;
            total.policy_loss += s.policy_loss;
            total.value_loss += s.value_loss;
            total.entropy += s.entropy;
        }
        updates += 1;
        let eps = &buffer.episode_scores;
        let mean_score =
            (!eps.is_empty()).then(|| mean(&eps.iter().map(|e| mean(e)).collect::<Vec<_>>()));
        let mut role_scores = BTreeMap::new();
        if !eps.is_empty() {
            for role in roles
                .iter()
                .copied()
                .collect::<std::collections::BTreeSet<Role>>()
            {
                let per: Vec<f64> = eps
                    .iter()
                    .flat_map(|e| {
                        e.iter()
                            .zip(&roles)
                            .filter(|(_, r)| **r == role)
                            .map(|(s, _)| *s)
                    })
                    .collect();
                role_scores.insert(role.name().to_string(), mean(&per));
            }
        }
        let nb = learners.bundles.len() as f64;
        let record = MetricsRecord {
            phase: run.name.to_string(),
            update: updates,
            step: steps,
            episodes: eps.len(),
            mean_score,
            role_scores,
            policy_loss: total.policy_loss / nb,
            value_loss: total.value_loss / nb,
            entropy: total.entropy / nb,
        };
        (run.sink)(&record);
        if let Some(m) = mean_score {
            history.push(m);
            if convergence_check(
                &history,
                config.convergence_window,
                config.convergence_threshold,
            ) {
                converged = true;
                info!("{} converged after {steps} steps", run.name);
                break;
            }
        }
    }
    let warning = (!converged).then(|| stalled(&history)).flatten();
    if let Some(w) = &warning {
        warn!("{}: {w}", run.name);
    }
    Ok(PhaseOutcome {
        learners: learners.clone(),
        history,
        steps,
        updates,
        converged,
        warning,
    })
}

fn stalled(history: &[f64]) -> Option<String> {
    if history.len() < 2 {
        return Some("too few finished episodes to judge improvement".into());
    }
    let q = (history.len() / 4).max(1);
    let first = mean(&history[..q]);
    let last = mean(&history[history.len() - q..]);
    (last <= first)
        .then(|| format!("budget exhausted without reward improvement ({first:.3} -> {last:.3})"))
}

/// Trains fresh policies with PPO and logs attention pairs for every
/// self-attention agent. Returns the newest tenth of each agent's pairs.
pub fn phase1(
    setup: &TrainSetup,
    config: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<Phase1Output> {
    if setup.variant == Variant::InverseAtt {
        return Err(Error::config(
            "phase 1 trains mlp_baseline or self_att policies; inverse attention starts in phase 3",
        ));
    }
    setup.spec.validate()?;
    config.validate()?;
    let mut learners = Learners::new(
        &setup.spec,
        setup.variant,
        setup.critic,
        config.gain,
        config.share_policy,
        derive_seed(config.seed, 1),
    )?;
    let n = setup.spec.num_agents();
    let rollouts = config.phase1_steps.div_ceil(config.steps_per_rollout());
    let capacity = config
        .pair_capacity
        .unwrap_or(rollouts * config.steps_per_rollout() / 10 + 1);
    let mut datasets = vec![PairDataset::new(Some(capacity)); n];
    let log = setup.variant == Variant::SelfAtt;
    let outcome = run_phase(
        setup,
        config,
        &mut learners,
        log.then_some(datasets.as_mut_slice()),
        PhaseRun {
            name: "phase1",
            budget: config.phase1_steps,
            stream: 11,
            sink,
        },
    )?;
    Ok(Phase1Output {
        outcome,
        datasets: datasets.iter().map(trim_dataset).collect(),
    })
}

/// Fit quality of an inverse network.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IwReport {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub final_validation_loss: f64,
    pub test_loss: f64,
    /// Test loss of predicting a uniform distribution over visible goals.
    pub uniform_test_loss: f64,
    /// Per-rank agreement of predicted and logged weight orderings on the test split.
    pub rank_accuracy: Vec<f64>,
    pub validation_history: Vec<f64>,
}

/// Masked per-sample mean squared error, averaged over samples.
fn masked_mse(pred: &Matrix, target: &Matrix, mask: &Matrix) -> f64 {
    let n = pred.nrows();
    let mut total = 0.0;
    for b in 0..n {
        let k = mask.row(b).sum().max(1.0);
        let s: f64 = (0..pred.ncols())
            .map(|g| mask[[b, g]] * (pred[[b, g]] - target[[b, g]]).powi(2))
            .sum();
        total += s / k;
    }
    total / n.max(1) as f64
}

struct Split<'a> {
    batch: IwBatch,
    target: Matrix,
    entries: Vec<&'a PairEntry>,
}

fn split<'a>(entries: Vec<&'a PairEntry>) -> Result<Split<'a>> {
    let inputs: Vec<&IwInput> = entries.iter().map(|e| &e.input).collect();
    let batch = IwBatch::new(&inputs)?;
    let target = rows(
        entries
            .iter()
            .flat_map(|e| e.weights.iter().copied())
            .collect(),
        batch.goals,
    );
    if target.nrows() != batch.n {
        return Err(Error::contract(
            "logged weights do not match the slot count",
        ));
    }
    Ok(Split {
        batch,
        target,
        entries,
    })
}

/// Visible-goal weights of one sample, in slot order.
fn visible(weights: &[f64], mask: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m > 0.0)
        .map(|(w, _)| *w)
        .collect()
}

/// How well an inverse network reproduces logged weights.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IwFit {
    pub samples: usize,
    /// Masked mean squared error over visible goals.
    pub mse: f64,
    /// The same error for a uniform distribution over visible goals.
    pub uniform_mse: f64,
    pub rank_accuracy: Vec<f64>,
}

pub fn iw_fit(iw: &IWNet, entries: &[&PairEntry]) -> Result<IwFit> {
    if entries.is_empty() {
        return Err(Error::contract("no pairs to score"));
    }
    let s = split(entries.to_vec())?;
    let pred = iw.predict(&s.batch)?;
    let uniform = Matrix::from_shape_fn(s.target.dim(), |(b, g)| {
        let k = s.batch.mask.row(b).sum().max(1.0);
        s.batch.mask[[b, g]] / k
    });
    let mut p = Vec::with_capacity(entries.len());
    let mut t = Vec::with_capacity(entries.len());
    for (b, e) in entries.iter().enumerate() {
        let mask = &e.input.mask;
        p.push(visible(&pred.row(b).to_vec(), mask));
        t.push(visible(&e.weights, mask));
    }
    Ok(IwFit {
        samples: entries.len(),
        mse: masked_mse(&pred, &s.target, &s.batch.mask),
        uniform_mse: masked_mse(&uniform, &s.target, &s.batch.mask),
        rank_accuracy: rank_accuracy(&p, &t)?,
    })
}

/// Fits an inverse attention network for `role` on the pooled pairs.
/// Entries are shuffled and split 70/10/20; training stops once validation
/// loss has not improved for `patience` epochs and the best parameters are kept.
pub fn phase2(
    datasets: &[&PairDataset],
    role: Role,
    hyper: &IwTrainConfig,
) -> Result<(IWNet, IwReport)> {
    hyper.validate()?;
    let mut entries: Vec<&PairEntry> = datasets
        .iter()
        .flat_map(|d| d.entries())
        .filter(|e| e.raw.role == role)
        .collect();
    if entries.len() < 10 {
        return Err(Error::config(format!(
            "inverse network training needs at least 10 {} pairs, got {}",
            role.name(),
            entries.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    entries.shuffle(&mut rng);
    let n = entries.len();
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let test = split(entries.split_off(n_train + n_val))?;
    let val = split(entries.split_off(n_train))?;
    let train = split(entries)?;

    let mut iw = IWNet::new(role, derive_seed(hyper.seed, 1));
    let adam = AdamConfig::with_lr(hyper.lr);
    let mut best: (f64, usize, ParamStore) = (f64::INFINITY, 0, iw.store.clone());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut since = 0;
    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let inputs: Vec<&IwInput> = chunk.iter().map(|&i| &train.entries[i].input).collect();
            let batch = IwBatch::new(&inputs)?;
            let target = train.target.select(ndarray::Axis(0), chunk);
            let mut tape = Tape::new();
            let loss = iw.loss_tape(&mut tape, &batch, &target)?;
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Training(format!(
                    "non-finite inverse-network loss at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            iw.store.zero_grad();
            grads.accumulate_into(&mut iw.store);
            iw.store.adam_step(&adam);
        }
        let v = masked_mse(&iw.predict(&val.batch)?, &val.target, &val.batch.mask);
        history.push(v);
        if v < best.0 {
            best = (v, epoch, iw.store.clone());
            since = 0;
        } else {
            since += 1;
            if since >= hyper.patience {
                break;
            }
        }
    }
    let final_val = *history.last().expect("at least one epoch");
    iw.store = best.2;

    let fit = iw_fit(&iw, &test.entries)?;
    let report = IwReport {
        train: train.entries.len(),
        validation: val.entries.len(),
        test: test.entries.len(),
        epochs_run: history.len(),
        best_epoch: best.1,
        best_validation_loss: best.0,
        final_validation_loss: final_val,
        test_loss: fit.mse,
        uniform_test_loss: fit.uniform_mse,
        rank_accuracy: fit.rank_accuracy,
        validation_history: history,
    };
    info!(
        "inverse network for {}: test loss {:.5} (uniform {:.5}), rank-1 accuracy {:.3}",
        role.name(),
        report.test_loss,
        report.uniform_test_loss,
        report.rank_accuracy.first().copied().unwrap_or(f64::NAN)
    );
    Ok((iw, report))
}

/// Composes every self-attention bundle whose role has an inverse network
/// into an inverse-attention bundle and continues PPO with the inverse
/// networks frozen.
pub fn phase3(
    setup: &TrainSetup,
    config: &TrainConfig,
    phase1: &Learners,
    iws: &[IWNet],
    sink: &mut dyn FnMut(&MetricsRecord),
) -> Result<PhaseOutcome> {
    let mut learners = compose_learners(phase1, iws)?;
    let setup = TrainSetup {
        variant: Variant::InverseAtt,
        ..setup.clone()
    };
    run_phase(
        &setup,
        config,
        &mut learners,
        None,
        PhaseRun {
            name: "phase3",
            budget: config.phase3_steps,
            stream: 33,
            sink,
        },
    )
}

/// Phase-3 starting point: identity-initialized compositions of the phase-1 bundles.
pub fn compose_learners(phase1: &Learners, iws: &[IWNet]) -> Result<Learners> {
    let mut composed = 0;
    let bundles = phase1
        .bundles
        .iter()
        .map(|b| match iws.iter().find(|iw| iw.role == b.meta.role) {
            Some(iw) if b.variant == Variant::SelfAtt => {
                composed += 1;
                PolicyBundle::compose_inverse(b, iw.clone())
            }
            _ => Ok(b.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    if composed == 0 {
        return Err(Error::config(
            "no self-attention bundle matches the role of any inverse network",
        ));
    }
    Ok(Learners {
        bundles,
        assignment: phase1.assignment.clone(),
    })
}
