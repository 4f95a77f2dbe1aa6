use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FieldKind, GFDataset, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, Dense, Matrix, ParamStore, Tape, Var};

/// Anything that maps a batch of noisy points and their times to scores.
pub trait ScoreFunction {
    fn dim(&self) -> usize;
    /// `x` is `B x dim`, `t` has one time per row.
    fn score(&self, x: &Matrix, t: &[f64]) -> Result<Matrix>;
}

/// Time-conditioned score network. The raw MLP sees `[x / sqrt(1 + sigma^2), t]`
/// and its output is divided by `sigma(t)`.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    pub kind: FieldKind,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
    layers: [Dense; 3],
}

pub const SCORE_HIDDEN: usize = 64;

impl ScoreNet {
    pub fn new<R: Rng + ?Sized>(
        kind: FieldKind,
        dim: usize,
        hidden: usize,
        schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::contract("score net dimensions must be positive"));
        }
        schedule.validate()?;
        let mut store = ParamStore::new();
        let gain = 5.0 / 3.0;
        let layers = [
            Dense::new(&mut store, "score.0", dim + 1, hidden, gain, rng),
            Dense::new(&mut store, "score.1", hidden, hidden, gain, rng),
            Dense::new(&mut store, "score.2", hidden, dim, 1.0, rng),
        ];
        Ok(Self {
            kind,
            schedule,
            store,
            layers,
        })
    }

    /// Rebuilds a net from named arrays, e.g. after loading a checkpoint.
    pub fn from_store(kind: FieldKind, schedule: NoiseSchedule, store: ParamStore) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..3 {
            let get = |s: &str| {
                store
                    .find(&format!("score.{i}.{s}"))
                    .ok_or_else(|| Error::checkpoint(format!("score.{i}.{s}"), "missing array"))
            };
            layers.push(Dense {
                weight: get("weight")?,
                bias: get("bias")?,
            });
        }
        let layers: [Dense; 3] = layers.try_into().expect("three layers");
        let net = Self {
            kind,
            schedule,
            store,
            layers,
        };
        let dim = net.dim();
        if net.layers[0].inputs(&net.store) != dim + 1 {
            return Err(Error::checkpoint(
                "score.0.weight",
                "input width does not match output",
            ));
        }
        Ok(net)
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].outputs(&self.store)
    }

    fn precondition(&self, x: &Matrix, t: &[f64]) -> Result<Matrix> {
        if x.ncols() != self.dim() || x.nrows() != t.len() {
            return Err(Error::contract(format!(
                "score input {:?} with {} times, expected width {}",
                x.dim(),
                t.len(),
                self.dim()
            )));
        }
        let dim = self.dim();
        let mut input = Array2::zeros((x.nrows(), dim + 1));
        for (b, (xr, &tb)) in x.rows().into_iter().zip(t).enumerate() {
            let s = self.schedule.sigma(tb);
            let c = 1.0 / (1.0 + s * s).sqrt();
            for j in 0..dim {
                input[[b, j]] = c * xr[j];
            }
            input[[b, dim]] = tb;
        }
        Ok(input)
    }

    fn inv_sigma(&self, t: &[f64]) -> Matrix {
        Array2::from_shape_fn((t.len(), 1), |(b, _)| 1.0 / self.schedule.sigma(t[b]))
    }

    /// Records the forward pass on a tape, with gradients flowing to `store`.
    pub fn forward_tape(&self, tape: &mut Tape, x: &Matrix, t: &[f64]) -> Result<Var> {
        let input = tape.constant(self.precondition(x, t)?);
        let mut h = self.layers[0].forward(tape, &self.store, input)?;
        h = tape.tanh(h);
        h = self.layers[1].forward(tape, &self.store, h)?;
        h = tape.tanh(h);
        let out = self.layers[2].forward(tape, &self.store, h)?;
        let inv = tape.constant(self.inv_sigma(t));
        tape.mul_col(out, inv)
    }
}

impl ScoreFunction for ScoreNet {
    fn dim(&self) -> usize {
        self.layers[2].outputs(&self.store)
    }

    fn score(&self, x: &Matrix, t: &[f64]) -> Result<Matrix> {
        let mut h = self.precondition(x, t)?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(self.store.value(layer.weight)) + self.store.value(layer.bias);
            if i < 2 {
                h.mapv_inplace(f64::tanh);
            }
        }
        Ok(h * &self.inv_sigma(t))
    }
}

/// `mean_b lambda(t_b) * || s(x_b + sigma_b z_b, t_b) - (x_b - x~_b) / sigma_b^2 ||^2`
/// for given times and standard-normal draws.
pub fn dsm_loss_with_noise<S: ScoreFunction + ?Sized>(
    net: &S,
    schedule: &NoiseSchedule,
    batch: &Matrix,
    t: &[f64],
    z: &Matrix,
) -> Result<f64> {
    if batch.nrows() == 0 {
        return Err(Error::contract("dsm loss needs a nonempty batch"));
    }
    if z.dim() != batch.dim() || t.len() != batch.nrows() {
        return Err(Error::contract("noise draws must align with the batch"));
    }
    let mut noisy = batch.clone();
    let mut target = Array2::zeros(batch.dim());
    for b in 0..batch.nrows() {
        let s = schedule.sigma(t[b]);
        for j in 0..batch.ncols() {
            noisy[[b, j]] += s * z[[b, j]];
            target[[b, j]] = (batch[[b, j]] - noisy[[b, j]]) / (s * s);
        }
    }
    let score = net.score(&noisy, t)?;
    let mut total = 0.0;
    for b in 0..batch.nrows() {
        let d = &score.row(b) - &target.row(b);
        total += schedule.weight(t[b]) * d.dot(&d);
    }
    Ok(total / batch.nrows() as f64)
}

fn draw_noise<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> (Vec<f64>, Matrix) {
    let t: Vec<f64> = (0..rows).map(|_| schedule.sample_time(rng)).collect();
    let z = Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal));
    (t, z)
}

/// Monte-Carlo estimate of the denoising objective with `t ~ U(epsilon, T)`.
pub fn dsm_loss<S: ScoreFunction + ?Sized, R: Rng + ?Sized>(
    net: &S,
    batch: &Matrix,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let (t, z) = draw_noise(schedule, batch.nrows(), batch.ncols(), rng);
    dsm_loss_with_noise(net, schedule, batch, &t, &z)
}

/// Same objective recorded on a tape for training.
fn dsm_loss_tape(
    net: &ScoreNet,
    tape: &mut Tape,
    batch: &Matrix,
    t: &[f64],
    z: &Matrix,
) -> Result<Var> {
    let schedule = net.schedule;
    let sig = Array2::from_shape_fn((t.len(), 1), |(b, _)| schedule.sigma(t[b]));
    let noisy = batch + &(z * &sig);
    let target = (batch - &noisy) / &sig.mapv(|s| s * s);
    let score = net.forward_tape(tape, &noisy, t)?;
    let target = tape.constant(target);
    let diff = tape.sub(score, target)?;
    let sq = tape.square(diff);
    let per = tape.sum_cols(sq);
    let lambda = tape.constant(sig.mapv(|s| s * s));
    let weighted = tape.mul_col(per, lambda)?;
    Ok(tape.mean(weighted))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreTrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 128,
            epochs: 100,
            hidden: SCORE_HIDDEN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrainReport {
    /// Mean minibatch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl ScoreTrainReport {
    pub fn first(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Fits a fresh score net to `dataset` with Adam on the denoising objective.
pub fn train_score_net(
    dataset: &GFDataset,
    schedule: &NoiseSchedule,
    hyper: &ScoreTrainConfig,
) -> Result<(ScoreNet, ScoreTrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut net = ScoreNet::new(
        dataset.kind,
        dataset.dim(),
        hyper.hidden,
        *schedule,
        &mut rng,
    )?;
    let report = fit(&mut net, dataset, hyper, &mut rng)?;
    Ok((net, report))
}

/// Continues training `net` on `dataset`.
pub fn fit<R: Rng + ?Sized>(
    net: &mut ScoreNet,
    dataset: &GFDataset,
    hyper: &ScoreTrainConfig,
    rng: &mut R,
) -> Result<ScoreTrainReport> {
    if dataset.kind != net.kind {
        return Err(Error::contract(format!(
            "{} dataset given to a {} score net",
            dataset.kind.name(),
            net.kind.name()
        )));
    }
    if dataset.dim() != net.dim() || dataset.is_empty() {
        return Err(Error::contract("dataset width must match the score net"));
    }
    if hyper.batch_size == 0 || hyper.epochs == 0 {
        return Err(Error::config(
            "score training needs positive batch size and epochs",
        ));
    }
    let adam = AdamConfig {
        lr: hyper.lr,
        beta1: hyper.beta1,
        beta2: hyper.beta2,
        eps: 1e-8,
    };
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = ScoreTrainReport::default();
    for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch = dataset.samples.select(Axis(0), chunk);
            let (t, z) = draw_noise(&net.schedule, batch.nrows(), batch.ncols(), rng);
            let mut tape = Tape::new();
            let loss = dsm_loss_tape(net, &mut tape, &batch, &t, &z)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "score loss became {value} at epoch {epoch}, batch {batches}; grad norm {:.3e}",
                    net.store.grad_norm()
                )));
            }
            net.store.zero_grad();
            tape.backward(loss)?.accumulate_into(&mut net.store);
            net.store.adam_step(&adam);
            sum += value;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::debug!(
            "{} score net epoch {epoch}: loss {mean:.5}",
            net.kind.name()
        );
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// The two trained fields used to turn observations into goals.
#[derive(Clone, Debug)]
pub struct GradientFields {
    pub entity: Arc<ScoreNet>,
    pub boundary: Arc<ScoreNet>,
    /// Time at which both fields are queried.
    pub t_eval: f64,
}

impl GradientFields {
    pub fn new(entity: ScoreNet, boundary: ScoreNet) -> Result<Self> {
        if entity.kind != FieldKind::Entity || entity.dim() != 4 {
            return Err(Error::contract(
                "entity field must be a 4-D entity score net",
            ));
        }
        if boundary.kind != FieldKind::Boundary || boundary.dim() != 2 {
            return Err(Error::contract(
                "boundary field must be a 2-D boundary score net",
            ));
        }
        let t_eval = entity.schedule.epsilon;
        Ok(Self {
            entity: Arc::new(entity),
            boundary: Arc::new(boundary),
            t_eval,
        })
    }

    /// Quickly trained fields for tests and smoke runs.
    pub fn quick(seed: u64, samples: usize, epochs: usize) -> Result<Self> {
        let schedule = NoiseSchedule::default();
        let hyper = ScoreTrainConfig {
            epochs,
            seed,
            lr: 1e-3,
            ..ScoreTrainConfig::default()
        };
        let (entity, _) = train_score_net(
            &super::gen_entity_dataset(samples, seed)?,
            &schedule,
            &hyper,
        )?;
        let (boundary, _) = train_score_net(
            &super::gen_boundary_dataset(samples, seed + 1)?,
            &schedule,
            &hyper,
        )?;
        Self::new(entity, boundary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradfield::gen_boundary_dataset;

    struct Fixed<F: Fn(&[f64], f64) -> Vec<f64>>(usize, F);

    impl<F: Fn(&[f64], f64) -> Vec<f64>> ScoreFunction for Fixed<F> {
        fn dim(&self) -> usize {
            self.0
        }
        fn score(&self, x: &Matrix, t: &[f64]) -> Result<Matrix> {
            let mut out = Array2::zeros(x.dim());
            for b in 0..x.nrows() {
                let v = (self.1)(x.row(b).as_slice().unwrap(), t[b]);
                out.row_mut(b).assign(&ndarray::ArrayView1::from(&v));
            }
            Ok(out)
        }
    }

    #[test]
    fn exact_target_gives_zero_loss() {
        let s = NoiseSchedule::default();
        let x0 = [0.3, -0.2];
        let oracle = Fixed(2, move |xt: &[f64], t: f64| {
            let v = s.weight(t);
            vec![(x0[0] - xt[0]) / v, (x0[1] - xt[1]) / v]
        });
        let batch = Array2::from_shape_vec((1, 2), x0.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = dsm_loss(&oracle, &batch, &s, &mut rng).unwrap();
        assert!(loss.abs() < 1e-20, "{loss}");
    }

    #[test]
    fn zero_noise_reduces_to_weighted_score_norm() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ScoreNet::new(FieldKind::Boundary, 2, 16, s, &mut rng).unwrap();
        let batch = Array2::from_shape_vec((1, 2), vec![0.4, 0.1]).unwrap();
        let t = [0.3];
        let z = Array2::zeros((1, 2));
        let loss = dsm_loss_with_noise(&net, &s, &batch, &t, &z).unwrap();
        let sc = net.score(&batch, &t).unwrap();
        let expect = s.weight(0.3) * sc.iter().map(|v| v * v).sum::<f64>();
        assert!((loss - expect).abs() < 1e-12 * expect.max(1.0));
    }

    #[test]
    fn loss_is_nonnegative_and_rejects_empty() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = ScoreNet::new(FieldKind::Boundary, 2, 8, s, &mut rng).unwrap();
        let d = gen_boundary_dataset(32, 3).unwrap();
        assert!(dsm_loss(&net, &d.samples, &s, &mut rng).unwrap() >= 0.0);
        assert!(dsm_loss(&net, &Array2::zeros((0, 2)), &s, &mut rng).is_err());
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ScoreNet::new(FieldKind::Boundary, 2, 8, s, &mut rng).unwrap();
        let d = gen_boundary_dataset(16, 5).unwrap();
        let (t, z) = draw_noise(&s, 16, 2, &mut rng);
        let plain = dsm_loss_with_noise(&net, &s, &d.samples, &t, &z).unwrap();
        let mut tape = Tape::new();
        let v = dsm_loss_tape(&net, &mut tape, &d.samples, &t, &z).unwrap();
        assert!((tape.scalar(v) - plain).abs() < 1e-10 * plain);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = ScoreNet::new(FieldKind::Entity, 2, 8, s, &mut rng).unwrap();
        let d = gen_boundary_dataset(16, 5).unwrap();
        let hyper = ScoreTrainConfig::default();
        assert!(matches!(
            fit(&mut net, &d, &hyper, &mut rng),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn clone_is_independent_and_equal() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = ScoreNet::new(FieldKind::Boundary, 2, 8, s, &mut rng).unwrap();
        let copy = net.clone();
        let x = Array2::from_shape_vec((1, 2), vec![0.2, 0.3]).unwrap();
        assert_eq!(
            net.score(&x, &[0.5]).unwrap(),
            copy.score(&x, &[0.5]).unwrap()
        );
    }

    #[test]
    fn boundary_training_reduces_loss() {
        let d = gen_boundary_dataset(2000, 8).unwrap();
        let hyper = ScoreTrainConfig {
            epochs: 20,
            lr: 1e-3,
            ..ScoreTrainConfig::default()
        };
        let (_, report) = train_score_net(&d, &NoiseSchedule::default(), &hyper).unwrap();
        assert!(
            report.last() < 0.5 * report.first(),
            "{:?}",
            report.epoch_losses
        );
    }
}
