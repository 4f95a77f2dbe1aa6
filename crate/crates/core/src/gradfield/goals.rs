use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::net::{GradientFields, ScoreFunction};
use crate::engine::{RawObservation, Role, ScenarioSpec, Vec2};
use crate::error::{Error, Result};

/// Width of one goal vector: four field values then a six-way relation one-hot.
pub const GOAL_DIM: usize = 10;
/// Own velocity and position.
pub const SELF_INFO_DIM: usize = 4;
const FIELD_DIM: usize = 4;

/// Identity of a goal; the derived order is the goal order (role, id, wall last).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GoalKey {
    Entity { role: Role, id: usize },
    Wall,
}

/// How a goal relates to the observing agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GoalRelation {
    Own,
    Teammate,
    Opponent,
    Target,
    Obstacle,
    Wall,
}

impl GoalRelation {
    pub fn of(observer: Role, other: Role) -> Self {
        match other {
            Role::Landmark | Role::Grass => GoalRelation::Target,
            Role::Obstacle => GoalRelation::Obstacle,
            r if r == observer => GoalRelation::Teammate,
            _ => GoalRelation::Opponent,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub key: GoalKey,
    pub relation: GoalRelation,
    pub features: [f64; GOAL_DIM],
}

fn features(field: &[f64], relation: GoalRelation) -> [f64; GOAL_DIM] {
    let mut f = [0.0; GOAL_DIM];
    f[..field.len()].copy_from_slice(field);
    f[FIELD_DIM + relation.index()] = 1.0;
    f
}

/// Gradient-field goals seen by one agent at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalSet {
    pub observer: usize,
    pub role: Role,
    /// `[vel, pos]` of the observer.
    pub self_info: [f64; SELF_INFO_DIM],
    pub prev_action: Vec2,
    /// Visible entities in key order, then the wall.
    pub goals: Vec<Goal>,
}

impl GoalSet {
    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    /// The query goal built from the observer's own state.
    pub fn self_goal(&self) -> [f64; GOAL_DIM] {
        features(&self.self_info, GoalRelation::Own)
    }

    pub fn keys(&self) -> Vec<GoalKey> {
        self.goals.iter().map(|g| g.key).collect()
    }

    /// Scatters the goals into a fixed slot layout. Returns row-major
    /// `slots x GOAL_DIM` features (zeros for absent goals) and a 0/1 mask.
    pub fn to_slots(&self, layout: &GoalSlots) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = layout.len();
        let mut feats = vec![0.0; g * GOAL_DIM];
        let mut mask = vec![0.0; g];
        for goal in &self.goals {
            let s = layout.index_of(goal.key).ok_or_else(|| {
                Error::contract(format!("goal {:?} missing from slot layout", goal.key))
            })?;
            feats[s * GOAL_DIM..(s + 1) * GOAL_DIM].copy_from_slice(&goal.features);
            mask[s] = 1.0;
        }
        Ok((feats, mask))
    }
}

/// Every goal an observer could ever see, in goal order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSlots {
    pub keys: Vec<GoalKey>,
}

impl GoalSlots {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, key: GoalKey) -> Option<usize> {
        self.keys.binary_search(&key).ok()
    }
}

/// Slot layout for `observer`: every other entity, then the wall.
pub fn slot_layout(spec: &ScenarioSpec, observer: usize) -> GoalSlots {
    let mut keys: Vec<GoalKey> = spec
        .layout()
        .into_iter()
        .enumerate()
        .filter(|&(id, _)| id != observer)
        .map(|(id, role)| GoalKey::Entity { role, id })
        .collect();
    keys.push(GoalKey::Wall);
    keys.sort();
    GoalSlots { keys }
}

/// Applies the entity field to every visible entity and the boundary field to
/// the observer's position.
pub fn build_goalset(obs: &RawObservation, fields: &GradientFields) -> Result<GoalSet> {
    let k = obs.entities.len();
    let mut goals = Vec::with_capacity(k + 1);
    if k > 0 {
        let mut x = Array2::zeros((k, 4));
        for (r, e) in obs.entities.iter().enumerate() {
            x[[r, 0]] = obs.self_pos.x;
            x[[r, 1]] = obs.self_pos.y;
            x[[r, 2]] = e.rel_pos.x;
            x[[r, 3]] = e.rel_pos.y;
        }
        let s = fields.entity.score(&x, &vec![fields.t_eval; k])?;
        for (r, e) in obs.entities.iter().enumerate() {
            let relation = GoalRelation::of(obs.role, e.role);
            let row: Vec<f64> = s.row(r).to_vec();
            goals.push(Goal {
                key: GoalKey::Entity {
                    role: e.role,
                    id: e.id,
                },
                relation,
                features: features(&row, relation),
            });
        }
    }
    let p = Array2::from_shape_vec((1, 2), vec![obs.self_pos.x, obs.self_pos.y])
        .expect("1 x 2 position");
    let wall = fields.boundary.score(&p, &[fields.t_eval])?;
    goals.sort_by_key(|g| g.key);
    goals.push(Goal {
        key: GoalKey::Wall,
        relation: GoalRelation::Wall,
        features: features(&[wall[[0, 0]], wall[[0, 1]]], GoalRelation::Wall),
    });
    if goals
        .iter()
        .any(|g| g.features.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Training(
            "gradient field produced a non-finite goal".into(),
        ));
    }
    Ok(GoalSet {
        observer: obs.agent_id,
        role: obs.role,
        self_info: [
            obs.self_vel.x,
            obs.self_vel.y,
            obs.self_pos.x,
            obs.self_pos.y,
        ],
        prev_action: obs.prev_action,
        goals,
    })
}
