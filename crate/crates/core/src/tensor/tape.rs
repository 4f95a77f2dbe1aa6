//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value on the tape is a 2-D matrix. Batches are laid out one sample
//! per row; per-goal quantities use a grouped layout where sample `b` owns
//! rows `b*G .. (b+1)*G` of a `(B*G) x d` matrix. The grouped primitives
//! ([`Tape::group_dot`], [`Tape::masked_softmax`], [`Tape::group_weighted_sum`])
//! implement batched single-head attention on that layout.

use ndarray::{Array2, Axis};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GroupDot { q: Var, k: Var, scale: f64 },
    MaskedSoftmax(Var),
    GroupWeightedSum { w: Var, v: Var },
    SimplexRenorm(Var, Option<Matrix>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Record of executed primitives; one backward sweep visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of the tape it came from.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter gradient belonging to `store` into its gradient slot.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, id) in &self.params {
            if !store.owns(id) {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                store.grad_mut(id).scaled_add(1.0, g);
            }
        }
    }
}

fn shape(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Records a parameter value as a constant: no gradient reaches the store.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::contract(format!(
                "matmul shape mismatch {:?} x {:?}",
                shape(va),
                shape(vb)
            )));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a + b` with the single-row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(Error::contract(format!(
                "add_row shape mismatch {:?} + {:?}",
                shape(va),
                shape(vb)
            )));
        }
        let out = va + vb;
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (shape(self.value(a)), shape(self.value(b)));
        if sa != sb {
            return Err(Error::contract(format!(
                "{what} shape mismatch {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise product with a single row broadcast down `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::contract("mul_row expects a 1 x n row"));
        }
        let out = va * vr;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    /// Elementwise product with a single column broadcast across `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.ncols() != 1 || vc.nrows() != va.nrows() {
            return Err(Error::contract("mul_col expects a B x 1 column"));
        }
        let out = va * vc;
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "minimum")?;
        let mut out = self.value(a).clone();
        out.zip_mut_with(self.value(b), |x, &y| *x = x.min(y));
        Ok(self.push(out, Op::Minimum(a, b)))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row, producing a `B x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        let rows = self.value(*first).nrows();
        if parts.iter().any(|p| self.value(*p).nrows() != rows) {
            return Err(Error::contract("concat_cols row mismatch"));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out =
            ndarray::concatenate(Axis(1), &views).map_err(|e| Error::contract(e.to_string()))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if start + len > va.ncols() {
            return Err(Error::contract("slice_cols out of range"));
        }
        let out = va.slice(ndarray::s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Per-sample dot products between a query row and that sample's group of keys.
    ///
    /// `q` is `B x d`, `k` is `(B*G) x d`; the result is `B x G` scaled by `scale`.
    pub fn group_dot(&mut self, q: Var, k: Var, groups: usize, scale: f64) -> Result<Var> {
        let (vq, vk) = (self.value(q), self.value(k));
        let (b, d) = shape(vq);
        if groups == 0 || vk.nrows() != b * groups || vk.ncols() != d {
            return Err(Error::contract(format!(
                "group_dot expects keys {}x{}, got {:?}",
                b * groups,
                d,
                shape(vk)
            )));
        }
        let mut out = Array2::zeros((b, groups));
        for i in 0..b {
            let qi = vq.row(i);
            for g in 0..groups {
                out[[i, g]] = scale * qi.dot(&vk.row(i * groups + g));
            }
        }
        Ok(self.push(out, Op::GroupDot { q, k, scale }))
    }

    /// Row-wise softmax; entries with a zero in `mask` are excluded and get weight 0.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Matrix>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(m) = mask {
            if shape(m) != shape(vx) {
                return Err(Error::contract("softmax mask shape mismatch"));
            }
        }
        let mut out = vx.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let visible = |j: usize| mask.is_none_or(|m| m[[i, j]] > 0.0);
            let max = (0..row.len())
                .filter(|&j| visible(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..row.len() {
                if visible(j) {
                    row[j] = (row[j] - max).exp();
                    total += row[j];
                } else {
                    row[j] = 0.0;
                }
            }
            if total > 0.0 {
                row.mapv_inplace(|v| v / total);
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    /// `out[b] = sum_g w[b, g] * v[b*G + g]` for `w: B x G`, `v: (B*G) x d`.
    pub fn group_weighted_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (vw, vv) = (self.value(w), self.value(v));
        let (b, groups) = shape(vw);
        if vv.nrows() != b * groups {
            return Err(Error::contract("group_weighted_sum row mismatch"));
        }
        let d = vv.ncols();
        let mut out = Array2::zeros((b, d));
        for i in 0..b {
            let mut acc = out.row_mut(i);
            for g in 0..groups {
                acc.scaled_add(vw[[i, g]], &vv.row(i * groups + g));
            }
        }
        Ok(self.push(out, Op::GroupWeightedSum { w, v }))
    }

    /// Clamps each row at zero (and at masked positions) then divides by its sum.
    /// A row with no positive mass becomes uniform over its unmasked entries.
    pub fn simplex_renorm(&mut self, x: Var, mask: Option<&Matrix>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(m) = mask {
            if shape(m) != shape(vx) {
                return Err(Error::contract("renorm mask shape mismatch"));
            }
        }
        let mut out = vx.mapv(|v| v.max(0.0));
        if let Some(m) = mask {
            out *= m;
        }
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let total: f64 = row.sum();
            if total > 0.0 {
                row.mapv_inplace(|v| v / total);
            } else {
                let count = mask.map_or(row.len() as f64, |m| m.row(i).sum());
                for j in 0..row.len() {
                    let on = mask.is_none_or(|m| m[[i, j]] > 0.0);
                    row[j] = if on && count > 0.0 { 1.0 / count } else { 0.0 };
                }
            }
        }
        Ok(self.push(out, Op::SimplexRenorm(x, mask.cloned())))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if shape(lv) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar, got {:?}",
                shape(lv)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.push((idx, *id)),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[b.0], gb);
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], -&g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads[a.0], &g * self.value(*b));
                    accumulate(&mut grads[b.0], &g * self.value(*a));
                }
                Op::MulRow(a, r) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[a.0], &g * self.value(*r));
                    accumulate(&mut grads[r.0], gr);
                }
                Op::MulCol(a, c) => {
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[a.0], &g * self.value(*c));
                    accumulate(&mut grads[c.0], gc);
                }
                Op::Scale(a, c) => accumulate(&mut grads[a.0], &g * *c),
                Op::Offset(a) => accumulate(&mut grads[a.0], g.clone()),
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&node.value, |gx, &y| *gx *= 1.0 - y * y);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&node.value, |gx, &y| {
                        if y <= 0.0 {
                            *gx = 0.0
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], &g * &node.value),
                Op::Square(a) => accumulate(&mut grads[a.0], &g * self.value(*a) * 2.0),
                Op::Minimum(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    ndarray::Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(va)
                        .and(vb)
                        .for_each(|ga, gb, &x, &y| if x <= y { *gb = 0.0 } else { *ga = 0.0 });
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |gx, &x| {
                        if x < *lo || x > *hi {
                            *gx = 0.0
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumAll(a) => {
                    let sh = shape(self.value(*a));
                    accumulate(&mut grads[a.0], Array2::from_elem(sh, g[[0, 0]]));
                }
                Op::SumCols(a) => {
                    let sh = shape(self.value(*a));
                    let ga = g.broadcast(sh).expect("column broadcast").to_owned();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let gp = g.slice(ndarray::s![.., start..start + w]).to_owned();
                        accumulate(&mut grads[p.0], gp);
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(shape(self.value(*a)));
                    ga.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                        .assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::GroupDot { q, k, scale } => {
                    let (vq, vk) = (self.value(*q), self.value(*k));
                    let groups = g.ncols();
                    let mut gq = Array2::zeros(shape(vq));
                    let mut gk = Array2::zeros(shape(vk));
                    for i in 0..vq.nrows() {
                        for j in 0..groups {
                            let c = scale * g[[i, j]];
                            if c == 0.0 {
                                continue;
                            }
                            let r = i * groups + j;
                            gq.row_mut(i).scaled_add(c, &vk.row(r));
                            gk.row_mut(r).scaled_add(c, &vq.row(i));
                        }
                    }
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                }
                Op::MaskedSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(shape(y));
                    for i in 0..y.nrows() {
                        let dot = y.row(i).dot(&g.row(i));
                        for j in 0..y.ncols() {
                            gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GroupWeightedSum { w, v } => {
                    let (vw, vv) = (self.value(*w), self.value(*v));
                    let groups = vw.ncols();
                    let mut gw = Array2::zeros(shape(vw));
                    let mut gv = Array2::zeros(shape(vv));
                    for i in 0..vw.nrows() {
                        let gi = g.row(i);
                        for j in 0..groups {
                            let r = i * groups + j;
                            gw[[i, j]] = gi.dot(&vv.row(r));
                            gv.row_mut(r).scaled_add(vw[[i, j]], &gi);
                        }
                    }
                    accumulate(&mut grads[w.0], gw);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::SimplexRenorm(x, mask) => {
                    let vx = self.value(*x);
                    let y = &node.value;
                    let mut gx = Array2::zeros(shape(vx));
                    for i in 0..vx.nrows() {
                        let active = |j: usize| {
                            vx[[i, j]] > 0.0 && mask.as_ref().is_none_or(|m| m[[i, j]] > 0.0)
                        };
                        let total: f64 = (0..vx.ncols())
                            .filter(|&j| active(j))
                            .map(|j| vx[[i, j]])
                            .sum();
                        if total <= 0.0 {
                            continue;
                        }
                        let dot = y.row(i).dot(&g.row(i));
                        for j in 0..vx.ncols() {
                            if active(j) {
                                gx[[i, j]] = (g[[i, j]] - dot) / total;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[1.0, -2.0, 0.5]]);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let sq = tape.square(xv);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap().accumulate_into(&mut store);
        assert_eq!(store.grad(x), &array![[2.0, -4.0, 1.0]]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[3.0, 4.0]]);
        let mut tape = Tape::new();
        let _unused = tape.param(&store, x);
        let c = tape.constant(array![[7.0]]);
        tape.backward(c).unwrap().accumulate_into(&mut store);
        assert!(store.grad(x).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_on_non_scalar_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.constant(array![[1.0, 2.0]]);
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x + x) -> 2x + 1
        let mut store = ParamStore::new();
        let x = store.add("x", array![[1.5, -1.0]]);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let p = tape.mul(xv, xv).unwrap();
        let s = tape.add(p, xv).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap().accumulate_into(&mut store);
        assert_eq!(store.grad(x), &array![[4.0, -1.0]]);
    }

    #[test]
    fn matmul_shape_mismatch_is_contract_violation() {
        let mut tape = Tape::new();
        let a = tape.constant(Array2::zeros((2, 3)));
        let b = tape.constant(Array2::zeros((2, 3)));
        assert!(matches!(tape.matmul(a, b), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_softmax_zeroes_hidden_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[1.0, 5.0, 1.0]]);
        let mask = array![[1.0, 0.0, 1.0]];
        let y = tape.masked_softmax(x, Some(&mask)).unwrap();
        let v = tape.value(y);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn simplex_renorm_uniform_fallback() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[-1.0, -2.0, 0.0, -3.0]]);
        let mask = array![[1.0, 1.0, 0.0, 1.0]];
        let y = tape.simplex_renorm(x, Some(&mask)).unwrap();
        let v = tape.value(y);
        for (j, expect) in [1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0].iter().enumerate() {
            assert!((v[[0, j]] - expect).abs() < 1e-15);
        }
    }
}
