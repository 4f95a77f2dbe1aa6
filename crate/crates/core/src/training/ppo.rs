use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use super::TrainConfig;
use crate::agents::{AgentObs, ObsBatch, PolicyBundle, ACTION_DIM};
use crate::error::{Error, Result};
use crate::tensor::{rows, AdamConfig, Matrix, Tape, Var};

/// One transition prepared for the clipped-surrogate update.
#[derive(Clone, Debug)]
pub struct PpoSample {
    pub obs: AgentObs,
    /// Unclamped action draw.
    pub action: [f64; ACTION_DIM],
    pub log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Means over every minibatch of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub minibatches: usize,
}

/// Per-sample surrogate pieces under the current parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateTerms {
    pub ratio: Vec<f64>,
    /// `ratio * A`.
    pub unclipped: Vec<f64>,
    /// `min(ratio * A, clip(ratio) * A)`.
    pub clipped: Vec<f64>,
}

struct PolicyTerms {
    loss: Var,
    log_prob: Var,
    ratio: Var,
    unclipped: Var,
    objective: Var,
    entropy: Var,
}

fn column(v: impl Iterator<Item = f64>) -> Matrix {
    let v: Vec<f64> = v.collect();
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column shape")
}

/// Diagonal-Gaussian log density of `actions` under `mean` and a shared `log_std` row.
fn log_prob(tape: &mut Tape, mean: Var, log_std: Var, actions: &Matrix) -> Result<Var> {
    let n = actions.nrows();
    let ones = tape.constant(Array2::ones((n, 1)));
    let ls = tape.matmul(ones, log_std)?;
    let a = tape.constant(actions.clone());
    let diff = tape.sub(a, mean)?;
    let neg = tape.neg(ls);
    let inv_std = tape.exp(neg);
    let z = tape.mul(diff, inv_std)?;
    let sq = tape.square(z);
    let quad = tape.sum_cols(sq);
    let quad = tape.scale(quad, -0.5);
    let norm = tape.sum_cols(ls);
    let lp = tape.sub(quad, norm)?;
    let c = 0.5 * ACTION_DIM as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(tape.offset(lp, -c))
}

fn policy_terms(
    tape: &mut Tape,
    bundle: &PolicyBundle,
    batch: &ObsBatch,
    samples: &[&PpoSample],
    advantages: &[f64],
    clip_eps: f64,
    entropy_coef: f64,
) -> Result<PolicyTerms> {
    let out = bundle.actor_forward(tape, batch)?;
    let ls = bundle.log_std_var(tape);
    let actions = rows(samples.iter().flat_map(|s| s.action).collect(), ACTION_DIM);
    let lp = log_prob(tape, out.mean, ls, &actions)?;
    let old = tape.constant(column(samples.iter().map(|s| s.log_prob)));
    let delta = tape.sub(lp, old)?;
    let ratio = tape.exp(delta);
    let adv = tape.constant(column(advantages.iter().copied()));
    let unclipped = tape.mul(ratio, adv)?;
    let clipped_ratio = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let clipped = tape.mul(clipped_ratio, adv)?;
    let objective = tape.minimum(unclipped, clipped)?;
    let mean_obj = tape.mean(objective);
    let pg = tape.neg(mean_obj);
    let ls_sum = tape.sum(ls);
    let c = 0.5 * ACTION_DIM as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let entropy = tape.offset(ls_sum, c);
    let bonus = tape.scale(entropy, entropy_coef);
    let loss = tape.sub(pg, bonus)?;
    Ok(PolicyTerms {
        loss,
        log_prob: lp,
        ratio,
        unclipped,
        objective,
        entropy,
    })
}

/// Ratio and surrogate values of `samples` (with their stored advantages) under
/// the bundle's current parameters.
pub fn surrogate_terms(
    bundle: &PolicyBundle,
    samples: &[PpoSample],
    clip_eps: f64,
) -> Result<SurrogateTerms> {
    let refs: Vec<&PpoSample> = samples.iter().collect();
    let obs: Vec<&AgentObs> = refs.iter().map(|s| &s.obs).collect();
    let batch = ObsBatch::new(&obs)?;
    let adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
    let mut tape = Tape::new();
    let t = policy_terms(&mut tape, bundle, &batch, &refs, &adv, clip_eps, 0.0)?;
    let col = |v: Var| tape.value(v).iter().copied().collect::<Vec<f64>>();
    Ok(SurrogateTerms {
        ratio: col(t.ratio),
        unclipped: col(t.unclipped),
        clipped: col(t.objective),
    })
}

fn normalized(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

/// `ppo_epochs` passes of shuffled minibatch updates over `samples`: a
/// clipped-surrogate actor step with an entropy bonus and a separate critic
/// step on normalized returns. Advantages are normalized over the whole batch.
pub fn ppo_update<R: Rng + ?Sized>(
    bundle: &mut PolicyBundle,
    samples: &[PpoSample],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    if samples.is_empty() {
        return Err(Error::contract("ppo_update needs at least one sample"));
    }
    let adv = normalized(&samples.iter().map(|s| s.advantage).collect::<Vec<_>>());
    let returns: Vec<f64> = samples.iter().map(|s| s.ret).collect();
    bundle.value_norm.update(&returns);
    let targets: Vec<f64> = returns
        .iter()
        .map(|&r| bundle.value_norm.normalize(r))
        .collect();
    let actor_cfg = AdamConfig::with_lr(config.lr);
    let critic_cfg = AdamConfig::with_lr(config.critic_lr);
    let mb = samples.len().div_ceil(config.minibatches.max(1));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = PpoStats::default();
    for epoch in 0..config.ppo_epochs {
        order.shuffle(rng);
        for (m, idx) in order.chunks(mb).enumerate() {
            let batch_samples: Vec<&PpoSample> = idx.iter().map(|&i| &samples[i]).collect();
            let obs: Vec<&AgentObs> = batch_samples.iter().map(|s| &s.obs).collect();
            let batch = ObsBatch::new(&obs)?;
            let a: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();

            let mut tape = Tape::new();
            let t = policy_terms(
                &mut tape,
                bundle,
                &batch,
                &batch_samples,
                &a,
                config.clip_eps,
                config.entropy_coef,
            )?;
            let loss = tape.scalar(t.loss);
            let grads = tape.backward(t.loss)?;
            let ratio = tape.value(t.ratio);
            let lp = tape.value(t.log_prob);
            let n = idx.len() as f64;
            let kl = batch_samples
                .iter()
                .zip(lp.iter())
                .map(|(s, l)| s.log_prob - l)
                .sum::<f64>()
                / n;
            let clipped = ratio
                .iter()
                .filter(|r| (**r - 1.0).abs() > config.clip_eps)
                .count() as f64
                / n;
            let entropy = tape.scalar(t.entropy);
            bundle.actor.zero_grad();
            grads.accumulate_into(&mut bundle.actor);
            drop(tape);

            let mut tape = Tape::new();
            let v = bundle.critic_forward(&mut tape, &batch)?;
            let target = tape.constant(column(idx.iter().map(|&i| targets[i])));
            let diff = tape.sub(v, target)?;
            let sq = tape.square(diff);
            let vloss = tape.mean(sq);
            let value_loss = tape.scalar(vloss);
            if !loss.is_finite() || !value_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite PPO loss at epoch {epoch}, minibatch {m}: policy {loss}, \
                     value {value_loss}, log_std {:?}, value stats {:?}",
                    bundle.log_std(),
                    bundle.value_norm
                )));
            }
            let vgrads = tape.backward(vloss)?;
            bundle.critic_store.zero_grad();
            vgrads.accumulate_into(&mut bundle.critic_store);
            drop(tape);

            bundle.actor.clip_grad_norm(config.max_grad_norm);
            bundle.actor.adam_step(&actor_cfg);
            bundle.critic_store.clip_grad_norm(config.max_grad_norm);
            bundle.critic_store.adam_step(&critic_cfg);

            stats.policy_loss += loss;
            stats.value_loss += value_loss;
            stats.entropy += entropy;
            stats.approx_kl += kl;
            stats.clip_fraction += clipped;
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    stats.approx_kl /= k;
    stats.clip_fraction /= k;
    Ok(stats)
}
