use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::Matrix;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside the [`ParamStore`] that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Matrix,
    grad: Matrix,
    m: Matrix,
    v: Matrix,
}

/// Named parameters with Adam moment accumulators and a step counter.
///
/// Clones keep the identity of the original store, so a [`ParamId`] minted by
/// one store is valid for every clone of it.
#[derive(Clone, Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Param>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let shape = value.raw_dim();
        self.params.push(Param {
            name: name.into(),
            grad: Array2::zeros(shape),
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            value,
        });
        ParamId {
            store: self.id,
            index: self.params.len() - 1,
        }
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.id && id.index < self.params.len()
    }

    fn slot(&self, id: ParamId) -> &Param {
        assert!(self.owns(id), "parameter id from a different store");
        &self.params[id.index]
    }

    fn slot_mut(&mut self, id: ParamId) -> &mut Param {
        assert!(self.owns(id), "parameter id from a different store");
        &mut self.params[id.index]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.slot(id).value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.slot_mut(id).value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.slot(id).grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.slot_mut(id).grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slot(id).name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId {
            store: self.id,
            index,
        })
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(|index| ParamId {
                store: self.id,
                index,
            })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let c = max_norm / norm;
            for p in &mut self.params {
                p.grad.mapv_inplace(|g| g * c);
            }
        }
        norm
    }

    /// Bias-corrected Adam update over every parameter; increments the step counter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut p.m)
                .and(&mut p.v)
                .for_each(|w, &g, m, v| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                });
        }
    }

    /// Flattened parameter values in insertion order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Copies values from `other` by name; both stores must hold the same names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), String> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| p.name.clone())?;
            if src.value.raw_dim() != p.value.raw_dim() {
                return Err(p.name.clone());
            }
            p.value.assign(&src.value);
        }
        Ok(())
    }
}

/// Orthogonal initialization scaled by `gain` (rows = fan-in, cols = fan-out).
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Matrix {
    // Gram-Schmidt over the longer side's vectors of a Gaussian matrix.
    let (n, k) = if rows >= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = Array2::zeros((rows, cols));
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            if rows >= cols {
                out[[i, j]] = gain * x;
            } else {
                out[[j, i]] = gain * x;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[0.3, -0.7]]);
        store.adam_step(&AdamConfig::default());
        assert_eq!(store.value(id), &array![[0.3, -0.7]]);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, 1.0]]);
        *store.grad_mut(id) = array![[0.5, -3.0]];
        store.adam_step(&AdamConfig::with_lr(0.01));
        let w = store.value(id);
        assert!((w[[0, 0]] - 0.99).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0]]);
        let cfg = AdamConfig::with_lr(0.1);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            store.zero_grad();
            let w = store.value(id)[[0, 0]];
            store.grad_mut(id)[[0, 0]] = 2.0 * w;
            store.adam_step(&cfg);
            let now = store.value(id)[[0, 0]].abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn orthogonal_columns_are_orthonormal_times_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = orthogonal(6, 4, 2.0, &mut rng);
        let gram = w.t().dot(&w);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 4.0 } else { 0.0 };
                assert!((gram[[i, j]] - expect).abs() < 1e-10);
            }
        }
        let wide = orthogonal(3, 5, 1.0, &mut rng);
        let gram = wide.dot(&wide.t());
        for i in 0..3 {
            assert!((gram[[i, i]] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn foreign_ids_are_not_owned() {
        let mut a = ParamStore::new();
        let b = ParamStore::new();
        let id = a.add("w", array![[1.0]]);
        assert!(a.owns(id));
        assert!(!b.owns(id));
        assert!(a.clone().owns(id));
    }
}
