//! Gradient-field goal representations.
//!
//! A time-dependent score network `s(x, t)` is fit by denoising score matching
//! to one of two synthetic datasets: the *entity* set (an own position anywhere
//! in the arena paired with a near-zero relative offset) and the *boundary* set
//! (positions uniform in `[-0.8, 0.8]^2`). Evaluated at a small noise level, the
//! entity field turns a relative position into a vector pointing at the entity
//! and the boundary field pulls toward the arena interior. [`build_goalset`]
//! applies both to an observation to produce the goals a policy attends over.

mod goals;
mod net;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use goals::{
    build_goalset, slot_layout, Goal, GoalKey, GoalRelation, GoalSet, GoalSlots, GOAL_DIM,
    SELF_INFO_DIM,
};
pub use net::{
    dsm_loss, dsm_loss_with_noise, fit, train_score_net, GradientFields, ScoreFunction, ScoreNet,
    ScoreTrainConfig, ScoreTrainReport,
};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    /// Own position (2) concatenated with a relative offset (2).
    Entity,
    /// A single position (2).
    Boundary,
    /// Any other dataset, e.g. analytic test densities.
    Generic,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Entity => "entity",
            FieldKind::Boundary => "boundary",
            FieldKind::Generic => "generic",
        }
    }
}

impl std::str::FromStr for FieldKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entity" => Ok(FieldKind::Entity),
            "boundary" => Ok(FieldKind::Boundary),
            "generic" => Ok(FieldKind::Generic),
            _ => Err(Error::config(format!("unknown field kind `{s}`"))),
        }
    }
}

/// Samples of a synthetic density, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct GFDataset {
    pub kind: FieldKind,
    pub samples: Matrix,
}

impl GFDataset {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }
}

/// Largest L1 norm of the relative offset in the entity dataset.
pub const ENTITY_OFFSET_L1: f64 = 1e-5;
/// Half-width of the boundary dataset's support.
pub const BOUNDARY_HALF_WIDTH: f64 = 0.8;

pub fn gen_entity_dataset(n: usize, seed: u64) -> Result<GFDataset> {
    if n == 0 {
        return Err(Error::contract("dataset size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Array2::zeros((n, 4));
    for mut row in samples.rows_mut() {
        row[0] = rng.random_range(-1.0..=1.0);
        row[1] = rng.random_range(-1.0..=1.0);
        // Offset drawn uniformly from the open L1 ball scaled just inside the bound.
        let r: f64 = ENTITY_OFFSET_L1 * 0.999 * rng.random::<f64>();
        let a: f64 = rng.random_range(0.0..1.0);
        let sx = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let sy = if rng.random::<bool>() { 1.0 } else { -1.0 };
        row[2] = sx * r * a;
        row[3] = sy * r * (1.0 - a);
    }
    Ok(GFDataset {
        kind: FieldKind::Entity,
        samples,
    })
}

pub fn gen_boundary_dataset(n: usize, seed: u64) -> Result<GFDataset> {
    if n == 0 {
        return Err(Error::contract("dataset size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = BOUNDARY_HALF_WIDTH;
    let samples = Array2::from_shape_fn((n, 2), |_| rng.random_range(-h..=h));
    Ok(GFDataset {
        kind: FieldKind::Boundary,
        samples,
    })
}

/// Noise levels `sigma(t) = sigma0^t` for `t` in `[epsilon, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma0: f64,
    #[serde(rename = "t_max")]
    pub t_max: f64,
    pub epsilon: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma0: 25.0,
            t_max: 1.0,
            epsilon: 1e-2,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 1.0) || !(self.epsilon > 0.0) || !(self.epsilon < self.t_max) {
            return Err(Error::config(
                "noise schedule needs sigma0 > 1 and 0 < epsilon < t_max",
            ));
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma0.powf(t)
    }

    /// Loss weight `lambda(t) = sigma(t)^2`.
    pub fn weight(&self, t: f64) -> f64 {
        let s = self.sigma(t);
        s * s
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(self.epsilon..=self.t_max).contains(&t) {
            return Err(Error::contract(format!(
                "time {t} outside [{}, {}]",
                self.epsilon, self.t_max
            )));
        }
        Ok(())
    }

    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random_range(self.epsilon..=self.t_max)
    }
}

/// Gaussian perturbation `x + sigma(t) z`.
pub fn perturb<R: Rng + ?Sized>(
    x: &[f64],
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    schedule.check_time(t)?;
    let s = schedule.sigma(t);
    Ok(x.iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + s * z
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entity_dataset_offsets_are_tiny() {
        let d = gen_entity_dataset(10_000, 4).unwrap();
        assert_eq!(d.len(), 10_000);
        for row in d.samples.rows() {
            assert!(row[2].abs() + row[3].abs() < ENTITY_OFFSET_L1);
            assert!(row[0].abs() <= 1.0 && row[1].abs() <= 1.0);
        }
        assert_eq!(d, gen_entity_dataset(10_000, 4).unwrap());
    }

    #[test]
    fn boundary_dataset_support_and_mean() {
        let n = 10_000;
        let d = gen_boundary_dataset(n, 9).unwrap();
        assert_eq!(d.len(), n);
        assert!(d.samples.iter().all(|v| v.abs() <= BOUNDARY_HALF_WIDTH));
        // Uniform on [-a, a] has variance a^2 / 3; the mean's standard error is sqrt(var / n).
        let se = (BOUNDARY_HALF_WIDTH.powi(2) / 3.0 / n as f64).sqrt();
        for c in 0..2 {
            let mean = d.samples.column(c).sum() / n as f64;
            assert!(mean.abs() < 3.0 * se, "mean {mean} vs 3se {}", 3.0 * se);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(gen_entity_dataset(0, 0).is_err());
        assert!(gen_boundary_dataset(0, 0).is_err());
    }

    #[test]
    fn schedule_is_increasing() {
        let s = NoiseSchedule::default();
        s.validate().unwrap();
        assert!(s.sigma(0.5) < s.sigma(0.6));
        assert!((s.sigma(1.0) - 25.0).abs() < 1e-12);
        assert!(NoiseSchedule { sigma0: 0.5, ..s }.validate().is_err());
    }

    #[test]
    fn perturb_range_and_determinism() {
        let s = NoiseSchedule::default();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            perturb(&[0.1, 0.2], 0.3, &s, &mut a).unwrap(),
            perturb(&[0.1, 0.2], 0.3, &s, &mut b).unwrap()
        );
        assert!(matches!(
            perturb(&[0.0], 0.0, &s, &mut a),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            perturb(&[0.0], 1.5, &s, &mut a),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn perturbation_is_linear_in_sigma() {
        // The same draws scaled by sigma: the offset shrinks to zero with sigma.
        let s = NoiseSchedule::default();
        let x = [0.25, -0.5];
        let lo = perturb(&x, 0.1, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let hi = perturb(&x, 0.9, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for j in 0..2 {
            let zl = (lo[j] - x[j]) / s.sigma(0.1);
            let zh = (hi[j] - x[j]) / s.sigma(0.9);
            assert!((zl - zh).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_variance_matches_sigma_squared() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 0.4;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let d = perturb(&[0.3], t, &s, &mut rng).unwrap()[0] - 0.3;
            sum += d;
            sq += d * d;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let expect = s.weight(t);
        assert!((var / expect - 1.0).abs() < 0.05, "var {var} vs {expect}");
    }
}
