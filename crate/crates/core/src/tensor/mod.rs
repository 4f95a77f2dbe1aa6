//! Dense layers, attention and reverse-mode gradients in 64-bit floats.

mod params;
mod tape;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use params::{orthogonal, AdamConfig, ParamId, ParamStore};
pub use tape::{Gradients, Matrix, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// `y = x W + b` with `W: in x out` and a `1 x out` bias.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            orthogonal(inputs, outputs, gain, rng),
        );
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, outputs)));
        Self { weight, bias }
    }

    pub fn inputs(&self, store: &ParamStore) -> usize {
        store.value(self.weight).nrows()
    }

    pub fn outputs(&self, store: &ParamStore) -> usize {
        store.value(self.weight).ncols()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }

    /// Same as [`Dense::forward`] but the parameters are recorded as constants.
    pub fn forward_frozen(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.frozen(store, self.weight);
        let b = tape.frozen(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }
}

/// `y = W2 act(W1 x + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct TwoLayerMlp {
    pub first: Dense,
    pub second: Dense,
    pub activation: Activation,
}

impl TwoLayerMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        activation: Activation,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        let hidden_gain = match activation {
            Activation::Tanh => 5.0 / 3.0,
            Activation::Relu => 2f64.sqrt(),
            Activation::Linear => 1.0,
        };
        Self {
            first: Dense::new(
                store,
                &format!("{name}.0"),
                inputs,
                hidden,
                hidden_gain,
                rng,
            ),
            second: Dense::new(
                store,
                &format!("{name}.1"),
                hidden,
                outputs,
                output_gain,
                rng,
            ),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = self.activation.apply(tape, h);
        self.second.forward(tape, store, h)
    }

    pub fn forward_frozen(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward_frozen(tape, store, x)?;
        let h = self.activation.apply(tape, h);
        self.second.forward_frozen(tape, store, h)
    }
}

/// Stack of dense layers with a shared hidden activation and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every width from input to output, e.g. `[in, 64, 64, out]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs input and output widths");
        let hidden_gain = match activation {
            Activation::Tanh => 5.0 / 3.0,
            Activation::Relu => 2f64.sqrt(),
            Activation::Linear => 1.0,
        };
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { output_gain } else { hidden_gain };
                Dense::new(store, &format!("{name}.{i}"), w[0], w[1], gain, rng)
            })
            .collect();
        Self { layers, activation }
    }

    fn run(&self, tape: &mut Tape, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = if frozen {
                layer.forward_frozen(tape, store, h)?
            } else {
                layer.forward(tape, store, h)?
            };
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.run(tape, store, x, false)
    }

    pub fn forward_frozen(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.run(tape, store, x, true)
    }
}

/// Single-head scaled dot-product attention with learned query/key projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
}

impl AttentionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_in: usize,
        key_in: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: store.add(format!("{name}.query"), orthogonal(query_in, dim, 1.0, rng)),
            key: store.add(format!("{name}.key"), orthogonal(key_in, dim, 1.0, rng)),
        }
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.value(self.query).ncols()
    }

    /// Attention weights `B x G` of each query row over its group of `G` key rows.
    pub fn weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        groups: usize,
        mask: Option<&Matrix>,
        frozen: bool,
    ) -> Result<Var> {
        let (wq, wk) = if frozen {
            (tape.frozen(store, self.query), tape.frozen(store, self.key))
        } else {
            (tape.param(store, self.query), tape.param(store, self.key))
        };
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(keys, wk)?;
        let scale = 1.0 / (self.dim(store) as f64).sqrt();
        let logits = tape.group_dot(q, k, groups, scale)?;
        tape.masked_softmax(logits, mask)
    }
}

/// Numerically stable softmax of a single vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("softmax needs a nonempty finite vector"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `softmax(<q, k_j> / sqrt(d))` over already-projected keys.
pub fn attention(query: &[f64], keys: &[Vec<f64>]) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::contract("attention over an empty key set"));
    }
    if keys.iter().any(|k| k.len() != query.len()) {
        return Err(Error::contract("query/key dimension mismatch"));
    }
    let scale = 1.0 / (query.len() as f64).sqrt();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| scale * k.iter().zip(query).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    softmax(&logits)
}

/// Convenience wrapper: forward a single unbatched vector through a dense layer.
pub fn dense(store: &ParamStore, layer: &Dense, x: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
    let y = layer.forward(&mut tape, store, xv)?;
    Ok(tape.value(y).iter().copied().collect())
}

pub fn two_layer_mlp(store: &ParamStore, mlp: &TwoLayerMlp, x: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"));
    let y = mlp.forward(&mut tape, store, xv)?;
    Ok(tape.value(y).iter().copied().collect())
}

pub fn row(values: &[f64]) -> Matrix {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

pub fn rows(data: Vec<f64>, cols: usize) -> Matrix {
    let n = if cols == 0 { 0 } else { data.len() / cols };
    Array2::from_shape_vec((n, cols), data).expect("rows shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_dense(n: usize) -> (ParamStore, Dense) {
        let mut store = ParamStore::new();
        let weight = store.add("w", Array2::eye(n));
        let bias = store.add("b", Array2::zeros((1, n)));
        (store, Dense { weight, bias })
    }

    #[test]
    fn identity_dense_is_identity() {
        let (store, layer) = identity_dense(3);
        assert_eq!(
            dense(&store, &layer, &[1.0, -2.0, 3.5]).unwrap(),
            vec![1.0, -2.0, 3.5]
        );
    }

    #[test]
    fn identity_two_layer_linear_is_identity() {
        let (mut store, first) = identity_dense(2);
        let second = Dense {
            weight: store.add("w2", Array2::eye(2)),
            bias: store.add("b2", Array2::zeros((1, 2))),
        };
        let mlp = TwoLayerMlp {
            first,
            second,
            activation: Activation::Linear,
        };
        assert_eq!(
            two_layer_mlp(&store, &mlp, &[0.25, -4.0]).unwrap(),
            vec![0.25, -4.0]
        );
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut store = ParamStore::new();
        let weight = store.add("w", Array2::zeros((3, 2)));
        let bias = store.add("b", array![[0.5, -1.5]]);
        let layer = Dense { weight, bias };
        assert_eq!(
            dense(&store, &layer, &[9.0, 8.0, 7.0]).unwrap(),
            vec![0.5, -1.5]
        );
    }

    #[test]
    fn dense_matches_hand_multiply() {
        let mut store = ParamStore::new();
        // 3 inputs -> 2 outputs
        let weight = store.add("w", array![[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5]]);
        let bias = store.add("b", array![[0.1, -0.2]]);
        let layer = Dense { weight, bias };
        let x = [1.0, 2.0, -1.0];
        // hand: y0 = 0.5 + 4.0 + 0.75 + 0.1 = 5.35 ; y1 = -1.0 + 0.5 - 1.5 - 0.2 = -2.2
        let y = dense(&store, &layer, &x).unwrap();
        assert!((y[0] - 5.35).abs() < 1e-12);
        assert!((y[1] + 2.2).abs() < 1e-12);
    }

    #[test]
    fn dense_shape_mismatch() {
        let (store, layer) = identity_dense(3);
        assert!(matches!(
            dense(&store, &layer, &[1.0, 2.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&[2.0; 4]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let shifted = softmax(&[100.0, 100.0 + 3f64.ln()]).unwrap();
        assert!((shifted[0] - p[0]).abs() < 1e-12);
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn attention_closed_forms() {
        assert_eq!(
            attention(&[0.3, 0.1], &[vec![1.0, 2.0]]).unwrap(),
            vec![1.0]
        );
        let w = attention(&[0.3, 0.1], &[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let w = attention(&[1.0], &[vec![0.0], vec![1.0]]).unwrap();
        assert!((w[0] - 0.2689414213699951).abs() < 1e-12);
        assert!((w[1] - 0.7310585786300049).abs() < 1e-12);
        assert!(attention(&[1.0], &[]).is_err());
    }

    #[test]
    fn batched_head_matches_unbatched_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let head = AttentionHead::new(&mut store, "att", 3, 3, 4, &mut rng);
        let q = [0.2, -0.4, 0.9];
        let keys = [[1.0, 0.0, -1.0], [0.3, 0.3, 0.3], [-0.5, 2.0, 0.1]];
        let mut tape = Tape::new();
        let qv = tape.constant(row(&q));
        let kv = tape.constant(rows(keys.concat(), 3));
        let w = head
            .weights(&mut tape, &store, qv, kv, 3, None, false)
            .unwrap();
        let batched: Vec<f64> = tape.value(w).iter().copied().collect();

        let project =
            |x: &[f64], m: &Matrix| -> Vec<f64> { row(x).dot(m).iter().copied().collect() };
        let pq = project(&q, store.value(head.query));
        let pk: Vec<Vec<f64>> = keys
            .iter()
            .map(|k| project(k, store.value(head.key)))
            .collect();
        let direct = attention(&pq, &pk).unwrap();
        for (a, b) in batched.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
