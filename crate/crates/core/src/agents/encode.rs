use serde::{Deserialize, Serialize};

use crate::engine::{RawObservation, Role, ScenarioSpec, Vec2, WorldState};
use crate::error::{Error, Result};
use crate::gradfield::{
    build_goalset, slot_layout, GoalKey, GoalSet, GoalSlots, GradientFields, GOAL_DIM,
    SELF_INFO_DIM,
};

/// Input widths shared by every bundle acting in one scenario role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsDims {
    /// Goal slots: every other entity plus the wall.
    pub goals: usize,
    /// Same-role teammates whose inferred attention is fused.
    pub teammates: usize,
    /// Flat per-agent observation width.
    pub flat: usize,
    /// Global state width.
    pub state: usize,
}

impl ObsDims {
    pub fn new(spec: &ScenarioSpec, role: Role) -> Self {
        let layout = spec.layout();
        let entities = layout.len();
        let same = layout.iter().filter(|r| **r == role).count();
        Self {
            goals: entities,
            teammates: same.saturating_sub(1),
            flat: 6 + 3 * (entities - 1),
            state: 4 * entities,
        }
    }
}

/// Another agent's view as consumed by the inverse attention network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IwInput {
    /// `goals x GOAL_DIM` slot features in that agent's own layout.
    pub slots: Vec<f64>,
    pub mask: Vec<f64>,
    pub self_info: [f64; SELF_INFO_DIM],
    /// The force that agent applied after seeing this observation.
    pub action: Vec2,
}

impl IwInput {
    pub fn from_goalset(goals: &GoalSet, layout: &GoalSlots, action: Vec2) -> Result<Self> {
        let (slots, mask) = goals.to_slots(layout)?;
        Ok(Self {
            slots,
            mask,
            self_info: goals.self_info,
            action,
        })
    }

    pub fn query(&self) -> [f64; SELF_INFO_DIM + 2] {
        let s = self.self_info;
        [s[0], s[1], s[2], s[3], self.action.x, self.action.y]
    }
}

/// A visible teammate's previous-step view, ready for the inverse network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeammateInput {
    /// Teammate slot in the observer's fused-weight input.
    pub slot: usize,
    pub input: IwInput,
    /// For each of the teammate's goal slots, the observer slot with the same key.
    pub mapping: Vec<Option<usize>>,
}

/// Everything the policy and critic heads read for one agent at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentObs {
    pub slots: Vec<f64>,
    pub mask: Vec<f64>,
    pub self_info: [f64; SELF_INFO_DIM],
    pub prev_action: Vec2,
    pub flat: Vec<f64>,
    pub state: Vec<f64>,
    /// `teammates x goals` inferred weights in the observer's slots; zero when absent.
    pub inferred: Vec<f64>,
}

impl AgentObs {
    pub fn goals(&self) -> usize {
        self.mask.len()
    }

    /// Writes one teammate's inferred weights (over its own slots) into the fused input.
    pub fn set_inferred(&mut self, mate: &TeammateInput, weights: &[f64]) -> Result<()> {
        let g = self.goals();
        if weights.len() != mate.mapping.len() || (mate.slot + 1) * g > self.inferred.len() {
            return Err(Error::contract(
                "inferred weights do not fit the teammate slot",
            ));
        }
        let row = &mut self.inferred[mate.slot * g..(mate.slot + 1) * g];
        row.iter_mut().for_each(|v| *v = 0.0);
        for (w, target) in weights.iter().zip(&mate.mapping) {
            if let Some(t) = target {
                row[*t] = *w;
            }
        }
        Ok(())
    }
}

/// One agent's encoded view at one step.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub obs: AgentObs,
    pub goals: GoalSet,
    pub raw: RawObservation,
    pub teammates: Vec<TeammateInput>,
}

/// Turns world snapshots into policy inputs for one scenario.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub spec: ScenarioSpec,
    pub fields: GradientFields,
    layouts: Vec<GoalSlots>,
}

impl Encoder {
    pub fn new(spec: &ScenarioSpec, fields: GradientFields) -> Self {
        let layouts = (0..spec.layout().len())
            .map(|id| slot_layout(spec, id))
            .collect();
        Self {
            spec: spec.clone(),
            fields,
            layouts,
        }
    }

    pub fn layout(&self, observer: usize) -> &GoalSlots {
        &self.layouts[observer]
    }

    pub fn dims(&self, role: Role) -> ObsDims {
        ObsDims::new(&self.spec, role)
    }

    pub fn goalset(&self, obs: &RawObservation) -> Result<GoalSet> {
        build_goalset(obs, &self.fields)
    }

    /// Same-role agents other than `observer`, in id order.
    pub fn teammates(&self, observer: usize) -> Vec<usize> {
        let layout = self.spec.layout();
        let role = layout[observer];
        layout
            .iter()
            .enumerate()
            .filter(|&(id, r)| *r == role && id != observer)
            .map(|(id, _)| id)
            .collect()
    }

    fn flat(&self, obs: &RawObservation) -> Vec<f64> {
        let layout = &self.layouts[obs.agent_id];
        let mut flat = vec![
            obs.self_vel.x,
            obs.self_vel.y,
            obs.self_pos.x,
            obs.self_pos.y,
            obs.prev_action.x,
            obs.prev_action.y,
        ];
        let base = flat.len();
        flat.resize(base + 3 * (layout.len() - 1), 0.0);
        for e in &obs.entities {
            let key = GoalKey::Entity {
                role: e.role,
                id: e.id,
            };
            if let Some(s) = layout.index_of(key) {
                flat[base + 3 * s] = e.rel_pos.x;
                flat[base + 3 * s + 1] = e.rel_pos.y;
                flat[base + 3 * s + 2] = 1.0;
            }
        }
        flat
    }

    fn state(world: &WorldState) -> Vec<f64> {
        world
            .entities
            .iter()
            .flat_map(|e| [e.pos.x, e.pos.y, e.vel.x, e.vel.y])
            .collect()
    }

    /// Encodes one agent's current observation. Teammate inputs are built only
    /// when `with_teammates` is set, since they cost extra field evaluations.
    pub fn encode(
        &self,
        world: &WorldState,
        agent: usize,
        with_teammates: bool,
    ) -> Result<Encoded> {
        let raw = world.observe(agent)?;
        let goals = self.goalset(&raw)?;
        let layout = &self.layouts[agent];
        let (slots, mask) = goals.to_slots(layout)?;
        let dims = self.dims(raw.role);
        let obs = AgentObs {
            slots,
            mask,
            self_info: goals.self_info,
            prev_action: raw.prev_action,
            flat: self.flat(&raw),
            state: Self::state(world),
            inferred: vec![0.0; dims.teammates * dims.goals],
        };
        let mates = if with_teammates {
            self.teammate_inputs(&raw)?
        } else {
            Vec::new()
        };
        Ok(Encoded {
            obs,
            goals,
            raw,
            teammates: mates,
        })
    }

    /// Inputs for every visible teammate, recomputed from its own perspective.
    pub fn teammate_inputs(&self, raw: &RawObservation) -> Result<Vec<TeammateInput>> {
        let mates = self.teammates(raw.agent_id);
        let own = &self.layouts[raw.agent_id];
        let mut out = Vec::new();
        for (j, prev) in &raw.teammate_prev_observations {
            let Some(slot) = mates.iter().position(|m| m == j) else {
                continue;
            };
            let action = raw
                .teammate_prev_actions
                .iter()
                .find(|(id, _)| id == j)
                .map(|(_, a)| *a)
                .unwrap_or(Vec2::ZERO);
            let theirs = &self.layouts[*j];
            let goals = self.goalset(prev)?;
            out.push(TeammateInput {
                slot,
                input: IwInput::from_goalset(&goals, theirs, action)?,
                mapping: theirs.keys.iter().map(|k| own.index_of(*k)).collect(),
            });
        }
        Ok(out)
    }
}

/// Pads a goal vector to `GOAL_DIM` for the self query.
pub fn self_goal(self_info: &[f64; SELF_INFO_DIM]) -> [f64; GOAL_DIM] {
    let mut g = [0.0; GOAL_DIM];
    g[..SELF_INFO_DIM].copy_from_slice(self_info);
    g[SELF_INFO_DIM] = 1.0;
    g
}
