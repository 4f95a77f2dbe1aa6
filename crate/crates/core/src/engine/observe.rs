use serde::{Deserialize, Serialize};

use super::{EntityState, Role, ScenarioSpec, Vec2, WorldState};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedEntity {
    pub id: usize,
    pub role: Role,
    /// Position relative to the observer.
    pub rel_pos: Vec2,
}

/// What one mobile entity perceives at a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawObservation {
    pub agent_id: usize,
    pub role: Role,
    pub self_pos: Vec2,
    pub self_vel: Vec2,
    /// The observer's own force from the previous step.
    pub prev_action: Vec2,
    /// Every other entity within visibility, in id order.
    pub entities: Vec<ObservedEntity>,
    /// Same-role visible teammates and the force each applied on the previous step.
    pub teammate_prev_actions: Vec<(usize, Vec2)>,
    /// Each visible teammate's own observation from the previous step
    /// (their teammate lists are left empty).
    pub teammate_prev_observations: Vec<(usize, RawObservation)>,
}

fn within(radius: Option<f64>, a: Vec2, b: Vec2) -> bool {
    radius.is_none_or(|r| a.distance(b) <= r)
}

fn observe_snapshot(entities: &[EntityState], spec: &ScenarioSpec, id: usize) -> RawObservation {
    let me = &entities[id];
    let radius = spec.visibility_radius;
    RawObservation {
        agent_id: id,
        role: me.role,
        self_pos: me.pos,
        self_vel: me.vel,
        prev_action: me.prev_action,
        entities: entities
            .iter()
            .filter(|e| e.id != id && within(radius, me.pos, e.pos))
            .map(|e| ObservedEntity {
                id: e.id,
                role: e.role,
                rel_pos: e.pos - me.pos,
            })
            .collect(),
        teammate_prev_actions: Vec::new(),
        teammate_prev_observations: Vec::new(),
    }
}

pub(super) fn observe(world: &WorldState, agent_id: usize) -> Result<RawObservation> {
    match world.entities.get(agent_id) {
        Some(e) if !e.is_static() => {}
        _ => {
            return Err(Error::contract(format!(
                "entity {agent_id} is not a mobile agent"
            )))
        }
    }
    let mut obs = observe_snapshot(&world.entities, &world.spec, agent_id);
    let teammates: Vec<usize> = obs
        .entities
        .iter()
        .filter(|e| e.role == obs.role)
        .map(|e| e.id)
        .collect();
    for j in teammates {
        obs.teammate_prev_actions
            .push((j, world.entities[j].prev_action));
        obs.teammate_prev_observations
            .push((j, observe_snapshot(&world.previous, &world.spec, j)));
    }
    Ok(obs)
}

/// Ids of entities whose centers lie within `radius` of `agent_id`, self excluded.
pub fn visible_set(world: &WorldState, agent_id: usize, radius: f64) -> Result<Vec<usize>> {
    if !(radius > 0.0) {
        return Err(Error::contract("visibility radius must be positive"));
    }
    let me = world
        .entities
        .get(agent_id)
        .ok_or_else(|| Error::contract(format!("unknown entity {agent_id}")))?;
    Ok(world
        .entities
        .iter()
        .filter(|e| e.id != agent_id && e.pos.distance(me.pos) <= radius)
        .map(|e| e.id)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{make_world, JointAction, ScenarioKind};

    fn two_agents() -> WorldState {
        let mut w = make_world(&ScenarioSpec::new(ScenarioKind::Spread, 2), 0).unwrap();
        w.entities[0].pos = Vec2::new(0.0, 0.0);
        w.entities[1].pos = Vec2::new(0.5, 0.0);
        w.previous.clone_from(&w.entities);
        w
    }

    #[test]
    fn relative_position_of_other_agent() {
        let w = two_agents();
        let obs = w.observe(0).unwrap();
        let other = obs.entities.iter().find(|e| e.id == 1).unwrap();
        assert_eq!(other.rel_pos, Vec2::new(0.5, 0.0));
        assert_eq!(obs.entities.len(), 3);
    }

    #[test]
    fn far_entities_are_hidden() {
        let mut w = two_agents();
        w.spec.visibility_radius = Some(0.5);
        w.entities[1].pos = Vec2::new(1.0, 0.0);
        w.entities[2].pos = Vec2::new(0.0, 0.4);
        w.entities[3].pos = Vec2::new(-0.9, -0.9);
        let obs = w.observe(0).unwrap();
        let ids: Vec<usize> = obs.entities.iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![2]);
        assert!(obs.teammate_prev_actions.is_empty());
    }

    #[test]
    fn teammate_prev_actions_follow_last_joint_action() {
        let mut w = two_agents();
        let a = JointAction(vec![Vec2::new(0.3, -0.1), Vec2::new(-0.7, 0.2)]);
        w.step(&a).unwrap();
        let obs = w.observe(0).unwrap();
        assert_eq!(obs.teammate_prev_actions, vec![(1, Vec2::new(-0.7, 0.2))]);
        let (j, prev) = &obs.teammate_prev_observations[0];
        assert_eq!(*j, 1);
        assert_eq!(prev.self_pos, Vec2::new(0.5, 0.0));
        assert_eq!(obs.prev_action, Vec2::new(0.3, -0.1));
    }

    #[test]
    fn unknown_or_static_ids_are_rejected() {
        let w = two_agents();
        assert!(matches!(w.observe(2), Err(Error::Contract(_))));
        assert!(matches!(w.observe(99), Err(Error::Contract(_))));
    }

    #[test]
    fn visible_set_examples() {
        let mut w = make_world(&ScenarioSpec::new(ScenarioKind::Spread, 2), 0).unwrap();
        w.entities[0].pos = Vec2::new(-1.0, -1.0);
        w.entities[1].pos = Vec2::new(1.0, 1.0);
        w.entities[2].pos = Vec2::new(-0.6, -1.0);
        w.entities[3].pos = Vec2::new(-1.0, -0.1);
        assert_eq!(visible_set(&w, 0, 1.5).unwrap(), vec![2, 3]);
        assert_eq!(visible_set(&w, 0, 3.0).unwrap(), vec![1, 2, 3]);

        w.entities[1].pos = Vec2::new(-0.6, -1.0); // 0.4
        w.entities[2].pos = Vec2::new(-0.1, -1.0); // 0.9
        w.entities[3].pos = Vec2::new(0.2, -1.0); // 1.2
        assert_eq!(visible_set(&w, 0, 1.0).unwrap(), vec![1, 2]);
        assert!(visible_set(&w, 0, 0.0).is_err());
    }
}
