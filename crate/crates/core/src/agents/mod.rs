//! Policy, critic, inverse-attention and weight-update networks.
//!
//! Batched forwards use the grouped layout of [`crate::tensor`]: a batch of
//! `B` agents with `G` goal slots stores goal features as a `(B*G) x GOAL_DIM`
//! matrix and attention weights as `B x G`. Unobserved slots are masked out of
//! every softmax.

mod encode;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use encode::{self_goal, AgentObs, Encoded, Encoder, IwInput, ObsDims, TeammateInput};

use crate::engine::{Role, ScenarioKind, Vec2};
use crate::error::{Error, Result};
use crate::gradfield::{GoalSet, GOAL_DIM, SELF_INFO_DIM};
use crate::tensor::{
    rows, Activation, AttentionHead, Dense, Matrix, Mlp, ParamId, ParamStore, Tape, TwoLayerMlp,
    Var,
};

pub const HIDDEN: usize = 64;
pub const ACTION_DIM: usize = 2;
pub const OUTPUT_GAIN: f64 = 0.01;
pub const INITIAL_LOG_STD: f64 = -0.5;
const IW_QUERY_DIM: usize = SELF_INFO_DIM + ACTION_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MlpBaseline,
    SelfAtt,
    InverseAtt,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::MlpBaseline => "mlp_baseline",
            Variant::SelfAtt => "self_att",
            Variant::InverseAtt => "inverse_att",
        }
    }

    pub fn uses_attention(self) -> bool {
        !matches!(self, Variant::MlpBaseline)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticKind {
    /// Own observation plus the global state.
    Centralized,
    /// Own observation only.
    Decentralized,
}

/// What a bundle was built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub scenario: ScenarioKind,
    pub n_per_side: usize,
    pub role: Role,
    pub dims: ObsDims,
}

/// Stacked inputs for a batch of agent steps.
#[derive(Clone, Debug)]
pub struct ObsBatch {
    pub n: usize,
    pub goals: usize,
    pub slots: Matrix,
    pub mask: Matrix,
    pub self_goal: Matrix,
    pub self_info: Matrix,
    pub flat: Matrix,
    pub state: Matrix,
    pub inferred: Matrix,
}

impl ObsBatch {
    pub fn new(obs: &[&AgentObs]) -> Result<Self> {
        let Some(first) = obs.first() else {
            return Err(Error::contract("empty observation batch"));
        };
        let g = first.goals();
        let consistent = obs.iter().all(|o| {
            o.goals() == g
                && o.slots.len() == first.slots.len()
                && o.flat.len() == first.flat.len()
                && o.state.len() == first.state.len()
                && o.inferred.len() == first.inferred.len()
        });
        if !consistent || first.slots.len() != g * GOAL_DIM {
            return Err(Error::contract(
                "observations in a batch must share one layout",
            ));
        }
        let cat = |f: &dyn Fn(&AgentObs) -> &[f64], w: usize| {
            let mut v = Vec::with_capacity(obs.len() * w);
            for o in obs {
                v.extend_from_slice(f(o));
            }
            rows(v, w)
        };
        let n = obs.len();
        let mut self_goal = Array2::zeros((n, GOAL_DIM));
        for (b, o) in obs.iter().enumerate() {
            for (j, v) in encode::self_goal(&o.self_info).into_iter().enumerate() {
                self_goal[[b, j]] = v;
            }
        }
        let inferred = if first.inferred.is_empty() {
            Array2::zeros((n, 0))
        } else {
            cat(&|o| &o.inferred, first.inferred.len())
        };
        Ok(Self {
            n,
            goals: g,
            slots: cat(&|o| &o.slots, GOAL_DIM),
            mask: cat(&|o| &o.mask, g),
            self_goal,
            self_info: cat(&|o| &o.self_info, SELF_INFO_DIM),
            flat: cat(&|o| &o.flat, first.flat.len()),
            state: cat(&|o| &o.state, first.state.len()),
            inferred,
        })
    }
}

/// `f`, `W`, `V` and `h` of the self-attention policy.
#[derive(Clone, Debug)]
pub struct SelfAttPolicy {
    pub f: TwoLayerMlp,
    pub attention: AttentionHead,
    pub v: TwoLayerMlp,
    pub h: TwoLayerMlp,
}

impl SelfAttPolicy {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, gain: f64, rng: &mut R) -> Self {
        let tanh = Activation::Tanh;
        Self {
            f: TwoLayerMlp::new(store, "f", GOAL_DIM, HIDDEN, HIDDEN, tanh, 1.0, rng),
            attention: AttentionHead::new(store, "w", HIDDEN, HIDDEN, HIDDEN, rng),
            v: TwoLayerMlp::new(store, "v", HIDDEN, HIDDEN, HIDDEN, tanh, 1.0, rng),
            h: TwoLayerMlp::new(
                store,
                "h",
                HIDDEN + SELF_INFO_DIM,
                HIDDEN,
                ACTION_DIM,
                tanh,
                gain,
                rng,
            ),
        }
    }

    /// Attention weights `B x G` and per-goal values `(B*G) x HIDDEN`.
    fn attend(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        slots: Var,
        self_goal: Var,
        groups: usize,
        mask: Option<&Matrix>,
    ) -> Result<(Var, Var)> {
        let keys = self.f.forward(tape, store, slots)?;
        let query = self.f.forward(tape, store, self_goal)?;
        let w = self
            .attention
            .weights(tape, store, query, keys, groups, mask, false)?;
        let values = self.v.forward(tape, store, keys)?;
        Ok((w, values))
    }

    /// Action mean and the weighted goal embedding.
    fn head(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        w: Var,
        values: Var,
        self_info: Var,
    ) -> Result<(Var, Var)> {
        let weighted = tape.group_weighted_sum(w, values)?;
        let input = tape.concat_cols(&[weighted, self_info])?;
        Ok((self.h.forward(tape, store, input)?, weighted))
    }
}

/// Dense fusion of own and inferred teammate weights.
#[derive(Clone, Debug)]
pub struct UWHead {
    pub layer: Dense,
    pub goals: usize,
    pub teammates: usize,
}

impl UWHead {
    /// Identity on the own-weight block, zeros on teammate blocks and bias.
    fn new(store: &mut ParamStore, goals: usize, teammates: usize) -> Self {
        let mut w = Array2::zeros((goals * (1 + teammates), goals));
        for g in 0..goals {
            w[[g, g]] = 1.0;
        }
        let weight = store.add("uw.weight", w);
        let bias = store.add("uw.bias", Array2::zeros((1, goals)));
        Self {
            layer: Dense { weight, bias },
            goals,
            teammates,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        own: Var,
        inferred: Var,
        mask: Option<&Matrix>,
    ) -> Result<Var> {
        let input = if self.teammates == 0 {
            own
        } else {
            tape.concat_cols(&[own, inferred])?
        };
        let raw = self.layer.forward(tape, store, input)?;
        tape.simplex_renorm(raw, mask)
    }
}

/// Predicts another same-role agent's attention from its view and action.
#[derive(Clone, Debug)]
pub struct IWNet {
    pub store: ParamStore,
    pub role: Role,
    query: TwoLayerMlp,
    f: TwoLayerMlp,
    attention: AttentionHead,
}

/// Stacked inverse-network inputs.
#[derive(Clone, Debug)]
pub struct IwBatch {
    pub n: usize,
    pub goals: usize,
    pub slots: Matrix,
    pub mask: Matrix,
    pub query: Matrix,
}

impl IwBatch {
    pub fn new(inputs: &[&IwInput]) -> Result<Self> {
        let Some(first) = inputs.first() else {
            return Err(Error::contract("empty inverse-network batch"));
        };
        let g = first.mask.len();
        if inputs
            .iter()
            .any(|i| i.mask.len() != g || i.slots.len() != g * GOAL_DIM)
        {
            return Err(Error::contract(
                "inverse-network inputs must share one layout",
            ));
        }
        let mut slots = Vec::with_capacity(inputs.len() * g * GOAL_DIM);
        let mut mask = Vec::with_capacity(inputs.len() * g);
        let mut query = Vec::with_capacity(inputs.len() * IW_QUERY_DIM);
        for i in inputs {
            slots.extend_from_slice(&i.slots);
            mask.extend_from_slice(&i.mask);
            query.extend_from_slice(&i.query());
        }
        Ok(Self {
            n: inputs.len(),
            goals: g,
            slots: rows(slots, GOAL_DIM),
            mask: rows(mask, g),
            query: rows(query, IW_QUERY_DIM),
        })
    }
}

impl IWNet {
    pub fn new(role: Role, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tanh = Activation::Tanh;
        let query = TwoLayerMlp::new(
            &mut store,
            "iw.query",
            IW_QUERY_DIM,
            HIDDEN,
            HIDDEN,
            tanh,
            1.0,
            &mut rng,
        );
        let f = TwoLayerMlp::new(
            &mut store, "iw.f", GOAL_DIM, HIDDEN, HIDDEN, tanh, 1.0, &mut rng,
        );
        let attention = AttentionHead::new(&mut store, "iw.w", HIDDEN, HIDDEN, HIDDEN, &mut rng);
        Self {
            store,
            role,
            query,
            f,
            attention,
        }
    }

    /// Rebuilds the network around loaded parameter values.
    pub fn with_values(role: Role, values: &ParamStore) -> Result<Self> {
        let mut net = Self::new(role, 0);
        net.store
            .load_values_from(values)
            .map_err(|name| Error::checkpoint(name, "missing or misshapen array"))?;
        Ok(net)
    }

    pub fn forward_tape(&self, tape: &mut Tape, batch: &IwBatch, frozen: bool) -> Result<Var> {
        let slots = tape.constant(batch.slots.clone());
        let query = tape.constant(batch.query.clone());
        let (q, k) = if frozen {
            (
                self.query.forward_frozen(tape, &self.store, query)?,
                self.f.forward_frozen(tape, &self.store, slots)?,
            )
        } else {
            (
                self.query.forward(tape, &self.store, query)?,
                self.f.forward(tape, &self.store, slots)?,
            )
        };
        self.attention.weights(
            tape,
            &self.store,
            q,
            k,
            batch.goals,
            Some(&batch.mask),
            frozen,
        )
    }

    /// Predicted weights, one row per input.
    pub fn predict(&self, batch: &IwBatch) -> Result<Matrix> {
        let mut tape = Tape::new();
        let w = self.forward_tape(&mut tape, batch, true)?;
        Ok(tape.value(w).clone())
    }

    /// Masked mean squared error against logged weights, recorded on a tape.
    pub fn loss_tape(&self, tape: &mut Tape, batch: &IwBatch, target: &Matrix) -> Result<Var> {
        if target.dim() != (batch.n, batch.goals) {
            return Err(Error::contract("target weights must be n x goals"));
        }
        let pred = self.forward_tape(tape, batch, false)?;
        let t = tape.constant(target.clone());
        let diff = tape.sub(pred, t)?;
        let sq = tape.square(diff);
        let mask = tape.constant(batch.mask.clone());
        let masked = tape.mul(sq, mask)?;
        let per = tape.sum_cols(masked);
        let inv = Array2::from_shape_fn((batch.n, 1), |(b, _)| {
            1.0 / batch.mask.row(b).sum().max(1.0)
        });
        let inv = tape.constant(inv);
        let per = tape.mul_col(per, inv)?;
        Ok(tape.mean(per))
    }
}

/// Inverse-network prediction over one agent's slot layout.
pub fn iw_forward(iw: &IWNet, input: &IwInput) -> Result<Vec<f64>> {
    Ok(iw.predict(&IwBatch::new(&[input])?)?.into_iter().collect())
}

/// Inverse-network prediction over a goal set in its own order.
pub fn iw_forward_goals(iw: &IWNet, goals: &GoalSet, action: Vec2) -> Result<Vec<f64>> {
    if goals.is_empty() {
        return Err(Error::contract("empty goal set"));
    }
    let g = goals.len();
    let input = IwInput {
        slots: goals.goals.iter().flat_map(|x| x.features).collect(),
        mask: vec![1.0; g],
        self_info: goals.self_info,
        action,
    };
    iw_forward(iw, &input)
}

/// Mean over samples of the per-goal squared error (over observed goals).
pub fn iw_loss(iw: &IWNet, batch: &[(Vec<f64>, IwInput)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("iw_loss needs a nonempty batch"));
    }
    let inputs: Vec<&IwInput> = batch.iter().map(|(_, i)| i).collect();
    let b = IwBatch::new(&inputs)?;
    let target = rows(
        batch.iter().flat_map(|(w, _)| w.iter().copied()).collect(),
        b.goals,
    );
    if target.nrows() != b.n {
        return Err(Error::contract("target weights must match the goal count"));
    }
    let mut tape = Tape::new();
    let loss = iw.loss_tape(&mut tape, &b, &target)?;
    Ok(tape.scalar(loss))
}

#[derive(Clone, Debug)]
enum ActorNet {
    Mlp(Mlp),
    Attention(SelfAttPolicy),
}

/// Actor, critic and optional inverse-attention parts of one learning agent.
#[derive(Clone, Debug)]
pub struct PolicyBundle {
    pub variant: Variant,
    pub critic_kind: CriticKind,
    pub meta: BundleMeta,
    pub actor: ParamStore,
    pub critic_store: ParamStore,
    pub iw: Option<IWNet>,
    pub value_norm: ValueNorm,
    actor_net: ActorNet,
    log_std: ParamId,
    uw: Option<UWHead>,
    critic: Mlp,
}

/// Tape handles of one actor forward.
#[derive(Clone, Copy, Debug)]
pub struct ActorOut {
    pub mean: Var,
    /// Weights actually used for the weighted goal (fused for inverse attention).
    pub weights: Option<Var>,
    /// The agent's own attention before fusion.
    pub own_weights: Option<Var>,
    pub weighted: Option<Var>,
}

/// Plain-matrix policy outputs for a batch.
#[derive(Clone, Debug)]
pub struct PolicyOut {
    pub means: Matrix,
    pub weights: Option<Matrix>,
    pub own_weights: Option<Matrix>,
}

impl PolicyBundle {
    pub fn new(
        variant: Variant,
        critic_kind: CriticKind,
        meta: BundleMeta,
        seed: u64,
    ) -> Result<Self> {
        Self::with_gain(variant, critic_kind, meta, OUTPUT_GAIN, seed)
    }

    /// Like [`PolicyBundle::new`] with an explicit actor output-layer gain.
    pub fn with_gain(
        variant: Variant,
        critic_kind: CriticKind,
        meta: BundleMeta,
        gain: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(gain > 0.0) {
            return Err(Error::config("actor output gain must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut actor = ParamStore::new();
        let dims = meta.dims;
        let actor_net = match variant {
            Variant::MlpBaseline => ActorNet::Mlp(Mlp::new(
                &mut actor,
                "pi",
                &[dims.flat, HIDDEN, HIDDEN, ACTION_DIM],
                Activation::Tanh,
                gain,
                &mut rng,
            )),
            _ => ActorNet::Attention(SelfAttPolicy::new(&mut actor, gain, &mut rng)),
        };
        let log_std = actor.add(
            "log_std",
            Array2::from_elem((1, ACTION_DIM), INITIAL_LOG_STD),
        );
        let uw = (variant == Variant::InverseAtt)
            .then(|| UWHead::new(&mut actor, dims.goals, dims.teammates));
        let mut critic_store = ParamStore::new();
        let critic_in = match critic_kind {
            CriticKind::Centralized => dims.flat + dims.state,
            CriticKind::Decentralized => dims.flat,
        };
        let critic = Mlp::new(
            &mut critic_store,
            "critic",
            &[critic_in, HIDDEN, HIDDEN, 1],
            Activation::Tanh,
            1.0,
            &mut rng,
        );
        let iw = (variant == Variant::InverseAtt).then(|| IWNet::new(meta.role, seed ^ 0x1f));
        Ok(Self {
            variant,
            critic_kind,
            meta,
            actor,
            critic_store,
            iw,
            value_norm: ValueNorm::default(),
            actor_net,
            log_std,
            uw,
            critic,
        })
    }

    /// Attaches a trained inverse network and an identity-initialized weight
    /// update head to a self-attention bundle.
    pub fn compose_inverse(self_att: &PolicyBundle, iw: IWNet) -> Result<Self> {
        if self_att.variant != Variant::SelfAtt {
            return Err(Error::contract(
                "inverse attention builds on a self-attention bundle",
            ));
        }
        if iw.role != self_att.meta.role {
            return Err(Error::contract(format!(
                "inverse network for {} cannot serve a {}",
                iw.role.name(),
                self_att.meta.role.name()
            )));
        }
        let mut out = self_att.clone();
        let dims = out.meta.dims;
        out.uw = Some(UWHead::new(&mut out.actor, dims.goals, dims.teammates));
        out.iw = Some(iw);
        out.variant = Variant::InverseAtt;
        Ok(out)
    }

    /// Copies parameter values by name from `other` into this bundle.
    pub fn load_values(&mut self, actor: &ParamStore, critic: &ParamStore) -> Result<()> {
        self.actor
            .load_values_from(actor)
            .map_err(|n| Error::checkpoint(n, "missing or misshapen actor array"))?;
        self.critic_store
            .load_values_from(critic)
            .map_err(|n| Error::checkpoint(n, "missing or misshapen critic array"))
    }

    pub fn self_att(&self) -> Option<&SelfAttPolicy> {
        match &self.actor_net {
            ActorNet::Attention(p) => Some(p),
            ActorNet::Mlp(_) => None,
        }
    }

    pub fn uw(&self) -> Option<&UWHead> {
        self.uw.as_ref()
    }

    pub fn log_std(&self) -> [f64; ACTION_DIM] {
        let v = self.actor.value(self.log_std);
        [v[[0, 0]], v[[0, 1]]]
    }

    pub fn log_std_id(&self) -> ParamId {
        self.log_std
    }

    fn check_batch(&self, batch: &ObsBatch) -> Result<()> {
        let d = self.meta.dims;
        if batch.goals != d.goals || batch.flat.ncols() != d.flat || batch.state.ncols() != d.state
        {
            return Err(Error::contract(format!(
                "batch layout ({} goals, flat {}, state {}) does not match bundle {:?}",
                batch.goals,
                batch.flat.ncols(),
                batch.state.ncols(),
                d
            )));
        }
        Ok(())
    }

    pub fn actor_forward(&self, tape: &mut Tape, batch: &ObsBatch) -> Result<ActorOut> {
        self.check_batch(batch)?;
        match &self.actor_net {
            ActorNet::Mlp(mlp) => {
                let x = tape.constant(batch.flat.clone());
                Ok(ActorOut {
                    mean: mlp.forward(tape, &self.actor, x)?,
                    weights: None,
                    own_weights: None,
                    weighted: None,
                })
            }
            ActorNet::Attention(p) => {
                let slots = tape.constant(batch.slots.clone());
                let sg = tape.constant(batch.self_goal.clone());
                let si = tape.constant(batch.self_info.clone());
                let (own, values) =
                    p.attend(tape, &self.actor, slots, sg, batch.goals, Some(&batch.mask))?;
                let w = match (&self.uw, self.variant) {
                    (Some(uw), Variant::InverseAtt) => {
                        if batch.inferred.ncols() != uw.goals * uw.teammates {
                            return Err(Error::contract("inferred weights have the wrong width"));
                        }
                        let inf = tape.constant(batch.inferred.clone());
                        uw.forward(tape, &self.actor, own, inf, Some(&batch.mask))?
                    }
                    _ => own,
                };
                let (mean, weighted) = p.head(tape, &self.actor, w, values, si)?;
                Ok(ActorOut {
                    mean,
                    weights: Some(w),
                    own_weights: Some(own),
                    weighted: Some(weighted),
                })
            }
        }
    }

    pub fn log_std_var(&self, tape: &mut Tape) -> Var {
        tape.param(&self.actor, self.log_std)
    }

    pub fn critic_forward(&self, tape: &mut Tape, batch: &ObsBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let x = match self.critic_kind {
            CriticKind::Centralized => {
                let f = tape.constant(batch.flat.clone());
                let s = tape.constant(batch.state.clone());
                tape.concat_cols(&[f, s])?
            }
            CriticKind::Decentralized => tape.constant(batch.flat.clone()),
        };
        self.critic.forward(tape, &self.critic_store, x)
    }

    pub fn policy(&self, batch: &ObsBatch) -> Result<PolicyOut> {
        let mut tape = Tape::new();
        let out = self.actor_forward(&mut tape, batch)?;
        Ok(PolicyOut {
            means: tape.value(out.mean).clone(),
            weights: out.weights.map(|w| tape.value(w).clone()),
            own_weights: out.own_weights.map(|w| tape.value(w).clone()),
        })
    }

    /// Critic estimates in return units (the critic itself predicts normalized values).
    pub fn values(&self, batch: &ObsBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.critic_forward(&mut tape, batch)?;
        Ok(tape
            .value(v)
            .iter()
            .map(|&x| self.value_norm.denormalize(x))
            .collect())
    }

    /// Fills `obs.inferred` from the inverse network for every given teammate.
    pub fn infer_teammates(
        &self,
        obs: &mut [AgentObs],
        mates: &[Vec<TeammateInput>],
    ) -> Result<()> {
        let Some(iw) = &self.iw else {
            return Err(Error::contract("bundle has no inverse network"));
        };
        let inputs: Vec<&IwInput> = mates.iter().flatten().map(|m| &m.input).collect();
        if inputs.is_empty() {
            return Ok(());
        }
        let pred = iw.predict(&IwBatch::new(&inputs)?)?;
        let mut r = 0;
        for (o, ms) in obs.iter_mut().zip(mates) {
            for m in ms {
                let row: Vec<f64> = pred.row(r).to_vec();
                o.set_inferred(m, &row)?;
                r += 1;
            }
        }
        Ok(())
    }
}

/// Running mean and variance of value targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueNorm {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for ValueNorm {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
            count: 0.0,
        }
    }
}

impl ValueNorm {
    /// Merges a batch into the running moments.
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if self.count == 0.0 {
            *self = Self {
                mean,
                var,
                count: n,
            };
            return;
        }
        let total = self.count + n;
        let delta = mean - self.mean;
        let m2 = self.var * self.count + var * n + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.var = m2 / total;
        self.count = total;
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt().max(1e-4)
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std()
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.std() + self.mean
    }
}

/// Output of the self-attention pathway on one goal set.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttOutput {
    pub weights: Vec<f64>,
    pub action_mean: Vec2,
    pub weighted_goal: Vec<f64>,
}

/// Self-attention forward over a goal set in its own order.
pub fn selfatt_forward(bundle: &PolicyBundle, goals: &GoalSet) -> Result<SelfAttOutput> {
    let Some(p) = bundle.self_att() else {
        return Err(Error::contract("bundle has no self-attention policy"));
    };
    if goals.is_empty() {
        return Err(Error::contract("empty goal set"));
    }
    let mut tape = Tape::new();
    let slots = tape.constant(rows(
        goals.goals.iter().flat_map(|g| g.features).collect(),
        GOAL_DIM,
    ));
    let sg = tape.constant(crate::tensor::row(&goals.self_goal()));
    let si = tape.constant(crate::tensor::row(&goals.self_info));
    let (w, values) = p.attend(&mut tape, &bundle.actor, slots, sg, goals.len(), None)?;
    let (mean, weighted) = p.head(&mut tape, &bundle.actor, w, values, si)?;
    let m = tape.value(mean);
    Ok(SelfAttOutput {
        weights: tape.value(w).iter().copied().collect(),
        action_mean: Vec2::new(m[[0, 0]], m[[0, 1]]),
        weighted_goal: tape.value(weighted).iter().copied().collect(),
    })
}

/// Log density of a diagonal Gaussian.
pub fn gaussian_log_prob(
    action: [f64; ACTION_DIM],
    mean: [f64; ACTION_DIM],
    log_std: [f64; ACTION_DIM],
) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    (0..ACTION_DIM)
        .map(|k| {
            let z = (action[k] - mean[k]) * (-log_std[k]).exp();
            -0.5 * z * z - log_std[k] - 0.5 * ln_2pi
        })
        .sum()
}

/// Samples (or takes the mean) and returns the clamped force with the
/// log-probability of the unclamped draw.
pub fn sample_action<R: Rng + ?Sized>(
    mean: [f64; ACTION_DIM],
    log_std: [f64; ACTION_DIM],
    rng: &mut R,
    stochastic: bool,
) -> (Vec2, [f64; ACTION_DIM], f64) {
    let raw = if stochastic {
        let mut a = [0.0; ACTION_DIM];
        for k in 0..ACTION_DIM {
            let z: f64 = rng.sample(StandardNormal);
            a[k] = mean[k] + log_std[k].exp() * z;
        }
        a
    } else {
        mean
    };
    let lp = gaussian_log_prob(raw, mean, log_std);
    (Vec2::new(raw[0], raw[1]).clamp(-1.0, 1.0), raw, lp)
}

/// One action for one agent.
pub fn act<R: Rng + ?Sized>(
    bundle: &PolicyBundle,
    obs: &AgentObs,
    rng: &mut R,
    stochastic: bool,
) -> Result<(Vec2, f64)> {
    let out = bundle.policy(&ObsBatch::new(&[obs])?)?;
    let mean = [out.means[[0, 0]], out.means[[0, 1]]];
    let (a, _, lp) = sample_action(mean, bundle.log_std(), rng, stochastic);
    Ok((a, lp))
}

/// Fuses own weights with inferred teammate weights (missing slots zero-filled).
pub fn uw_update(
    bundle: &PolicyBundle,
    own: &[f64],
    inferred: &[Vec<f64>],
    mask: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let Some(uw) = &bundle.uw else {
        return Err(Error::contract("bundle has no weight update head"));
    };
    if own.len() != uw.goals || inferred.iter().any(|w| w.len() != uw.goals) {
        return Err(Error::contract("weight vectors must cover every goal slot"));
    }
    if inferred.len() > uw.teammates {
        return Err(Error::contract(format!(
            "{} inferred vectors for {} teammate slots",
            inferred.len(),
            uw.teammates
        )));
    }
    let mut fused = vec![0.0; uw.goals * uw.teammates];
    for (s, w) in inferred.iter().enumerate() {
        fused[s * uw.goals..(s + 1) * uw.goals].copy_from_slice(w);
    }
    let mask = mask.map(|m| crate::tensor::row(m));
    let mut tape = Tape::new();
    let o = tape.constant(crate::tensor::row(own));
    let i = if uw.teammates == 0 {
        tape.constant(Array2::zeros((1, 0)))
    } else {
        tape.constant(rows(fused, uw.goals * uw.teammates))
    };
    let out = uw.forward(&mut tape, &bundle.actor, o, i, mask.as_ref())?;
    Ok(tape.value(out).iter().copied().collect())
}

/// Full inverse-attention composition for one agent: fused weights and action mean.
pub fn inverse_forward(
    bundle: &PolicyBundle,
    obs: &AgentObs,
    teammates: &[TeammateInput],
) -> Result<(Vec<f64>, Vec2)> {
    if bundle.variant != Variant::InverseAtt || bundle.iw.is_none() || bundle.uw.is_none() {
        return Err(Error::contract(
            "inverse forward needs an inverse-attention bundle",
        ));
    }
    let mut obs = vec![obs.clone()];
    obs[0].inferred.iter_mut().for_each(|v| *v = 0.0);
    bundle.infer_teammates(&mut obs, &[teammates.to_vec()])?;
    let out = bundle.policy(&ObsBatch::new(&[&obs[0]])?)?;
    let w = out
        .weights
        .expect("attention weights")
        .into_iter()
        .collect();
    Ok((w, Vec2::new(out.means[[0, 0]], out.means[[0, 1]])))
}

#[cfg(test)]
mod tests;
