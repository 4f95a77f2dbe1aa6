//! Seedable continuous 2-D particle world with five scenarios.
//!
//! Entities live in `[-1, 1]^2`. Mobile entities (agents, sheep, wolves) are
//! driven by a force per step through semi-implicit Euler integration with
//! linear damping, a speed cap, wall clamping and a soft spring penalty between
//! overlapping bodies. Landmarks, grass and obstacles never move. The only
//! randomness after reset is grass respawning, drawn from the world's own
//! generator, so a `(spec, seed, actions)` triple replays bit for bit.

mod observe;
mod reward;
mod scenario;
mod vec2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use observe::{visible_set, ObservedEntity, RawObservation};
pub use reward::RewardMode;
pub use scenario::{
    Body, Physics, RewardConstants, RewardSet, ScenarioKind, ScenarioSpec, DEFAULT_HORIZON,
    GRASS_COUNT, OBSTACLE_COUNT,
};
pub use vec2::Vec2;

use crate::error::{Error, Result};

pub const ARENA_MIN: f64 = -1.0;
pub const ARENA_MAX: f64 = 1.0;
/// Length of the arena diagonal.
pub const ARENA_DIAGONAL: f64 = 2.0 * std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Agent,
    Wolf,
    Sheep,
    Landmark,
    Grass,
    Obstacle,
}

impl Role {
    pub fn is_static(self) -> bool {
        matches!(self, Role::Landmark | Role::Grass | Role::Obstacle)
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Agent => "agent",
            Role::Wolf => "wolf",
            Role::Sheep => "sheep",
            Role::Landmark => "landmark",
            Role::Grass => "grass",
            Role::Obstacle => "obstacle",
        }
    }

    /// Mobile roles that oppose this one.
    pub fn is_opponent_of(self, other: Role) -> bool {
        matches!(
            (self, other),
            (Role::Wolf, Role::Sheep) | (Role::Sheep, Role::Wolf)
        )
    }
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "agent" => Ok(Role::Agent),
            "wolf" => Ok(Role::Wolf),
            "sheep" => Ok(Role::Sheep),
            "landmark" => Ok(Role::Landmark),
            "grass" => Ok(Role::Grass),
            "obstacle" => Ok(Role::Obstacle),
            _ => Err(Error::config(format!("unknown role `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityState {
    pub id: usize,
    pub role: Role,
    pub pos: Vec2,
    pub vel: Vec2,
    pub radius: f64,
    /// Zero for static entities.
    pub max_speed: f64,
    pub accel: f64,
    /// Force applied on the previous step (zero for static entities and at reset).
    pub prev_action: Vec2,
}

impl EntityState {
    pub fn is_static(&self) -> bool {
        self.role.is_static()
    }
}

/// One force per mobile entity, in entity order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointAction(pub Vec<Vec2>);

/// Contact events resolved during the most recent step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    /// `(sheep id, grass id)` pairs consumed before respawn.
    pub grass_eaten: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub training: Vec<f64>,
    pub scoring: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct WorldState {
    pub spec: ScenarioSpec,
    pub entities: Vec<EntityState>,
    pub step_index: usize,
    /// Entities as they were before the most recent step (the reset state at step 0).
    pub previous: Vec<EntityState>,
    pub events: StepEvents,
    rng: ChaCha8Rng,
    agent_ids: Vec<usize>,
}

fn uniform_point(rng: &mut ChaCha8Rng) -> Vec2 {
    Vec2::new(
        rng.random_range(ARENA_MIN..=ARENA_MAX),
        rng.random_range(ARENA_MIN..=ARENA_MAX),
    )
}

/// Builds the reset state of a scenario.
pub fn make_world(spec: &ScenarioSpec, seed: u64) -> Result<WorldState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &spec.physics;
    let layout = spec.layout();
    let n_agents = layout.iter().filter(|r| !r.is_static()).count();
    let mut entities = Vec::with_capacity(layout.len());
    for (id, role) in layout.into_iter().enumerate() {
        let body = match role {
            Role::Agent if spec.kind == ScenarioKind::Navigation => {
                if n_agents > 1 && id == n_agents - 1 {
                    Some(p.slow_agent)
                } else {
                    Some(p.fast_agent)
                }
            }
            Role::Agent => Some(p.agent),
            Role::Wolf => Some(p.wolf),
            Role::Sheep => Some(p.sheep),
            _ => None,
        };
        let (radius, accel, max_speed) = match (role, body) {
            (_, Some(b)) => (b.radius, b.accel, b.max_speed),
            (Role::Landmark, None) => (p.landmark_radius, 0.0, 0.0),
            (Role::Grass, None) => (p.grass_radius, 0.0, 0.0),
            (_, None) => (p.obstacle_radius, 0.0, 0.0),
        };
        entities.push(EntityState {
            id,
            role,
            pos: uniform_point(&mut rng),
            vel: Vec2::ZERO,
            radius,
            max_speed,
            accel,
            prev_action: Vec2::ZERO,
        });
    }
    let agent_ids = entities
        .iter()
        .filter(|e| !e.is_static())
        .map(|e| e.id)
        .collect();
    Ok(WorldState {
        spec: spec.clone(),
        previous: entities.clone(),
        entities,
        step_index: 0,
        events: StepEvents::default(),
        rng,
        agent_ids,
    })
}

impl WorldState {
    /// Entity ids of the mobile entities, i.e. the action order of a [`JointAction`].
    pub fn agent_ids(&self) -> &[usize] {
        &self.agent_ids
    }

    pub fn num_agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn entity(&self, id: usize) -> Option<&EntityState> {
        self.entities.get(id)
    }

    pub fn is_done(&self) -> bool {
        self.step_index >= self.spec.horizon
    }

    /// Advances the world by one step.
    pub fn step(&mut self, actions: &JointAction) -> Result<StepOutcome> {
        if actions.0.len() != self.agent_ids.len() {
            return Err(Error::contract(format!(
                "expected {} actions, got {}",
                self.agent_ids.len(),
                actions.0.len()
            )));
        }
        if self.is_done() {
            return Err(Error::contract("step called on a finished episode"));
        }
        if actions.0.iter().any(|a| !a.is_finite()) {
            return Err(Error::contract("non-finite action"));
        }
        self.previous.clone_from(&self.entities);
        let p = self.spec.physics.clone();

        // Control forces scaled by each body's acceleration.
        let mut dv = vec![Vec2::ZERO; self.entities.len()];
        for (&id, action) in self.agent_ids.iter().zip(&actions.0) {
            let force = action.clamp(-1.0, 1.0);
            let e = &mut self.entities[id];
            e.prev_action = force;
            dv[id] = force * (e.accel * p.dt);
        }

        // Soft collisions: mobile-mobile pairs push each other, obstacles push only the mover.
        let n = self.entities.len();
        for a in 0..n {
            for b in (a + 1)..n {
                let (ea, eb) = (&self.entities[a], &self.entities[b]);
                let collides = |e: &EntityState| !e.is_static() || e.role == Role::Obstacle;
                if !(collides(ea) && collides(eb)) || (ea.is_static() && eb.is_static()) {
                    continue;
                }
                let delta = ea.pos - eb.pos;
                let dist = delta.norm();
                let overlap = ea.radius + eb.radius - dist;
                if overlap <= 0.0 {
                    continue;
                }
                let dir = if dist > 1e-12 {
                    delta * (1.0 / dist)
                } else {
                    Vec2::new(1.0, 0.0)
                };
                let impulse = dir * (p.contact_stiffness * overlap * p.dt);
                if !ea.is_static() {
                    dv[a] += impulse;
                }
                if !eb.is_static() {
                    dv[b] -= impulse;
                }
            }
        }

        for e in self.entities.iter_mut().filter(|e| !e.is_static()) {
            let vel = (e.vel * (1.0 - p.damping) + dv[e.id]).cap_norm(e.max_speed);
            let target = e.pos + vel * p.dt;
            let pos = target.clamp(ARENA_MIN, ARENA_MAX);
            let mut vel = vel;
            // Walls absorb the outward velocity component.
            if pos.x != target.x {
                vel.x = 0.0;
            }
            if pos.y != target.y {
                vel.y = 0.0;
            }
            e.pos = pos;
            e.vel = vel;
        }

        self.resolve_grass();
        self.step_index += 1;
        let training = self.reward(RewardMode::Training);
        let scoring = self.reward(RewardMode::Scoring);
        Ok(StepOutcome {
            training,
            scoring,
            done: self.is_done(),
        })
    }

    fn resolve_grass(&mut self) {
        self.events.grass_eaten.clear();
        if self.spec.kind != ScenarioKind::Grassland {
            return;
        }
        let grass: Vec<usize> = self
            .entities
            .iter()
            .filter(|e| e.role == Role::Grass)
            .map(|e| e.id)
            .collect();
        for g in grass {
            let gp = self.entities[g].pos;
            let gr = self.entities[g].radius;
            let eater = self
                .entities
                .iter()
                .filter(|e| e.role == Role::Sheep)
                .find(|s| s.pos.distance(gp) < s.radius + gr)
                .map(|s| s.id);
            if let Some(sheep) = eater {
                self.events.grass_eaten.push((sheep, g));
                let fresh = uniform_point(&mut self.rng);
                self.entities[g].pos = fresh;
            }
        }
    }

    /// Per-agent rewards of the current state in the given mode.
    pub fn reward(&self, mode: RewardMode) -> Vec<f64> {
        reward::compute(self, mode)
    }

    pub fn observe(&self, agent_id: usize) -> Result<RawObservation> {
        observe::observe(self, agent_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spread() -> ScenarioSpec {
        ScenarioSpec::new(ScenarioKind::Spread, 3)
    }

    #[test]
    fn same_seed_same_world() {
        let a = make_world(&spread(), 7).unwrap();
        let b = make_world(&spread(), 7).unwrap();
        assert_eq!(a.entities, b.entities);
        let c = make_world(&spread(), 8).unwrap();
        assert_ne!(a.entities, c.entities);
    }

    #[test]
    fn scenario_entity_counts() {
        let count = |w: &WorldState, r: Role| w.entities.iter().filter(|e| e.role == r).count();
        let g = make_world(&ScenarioSpec::new(ScenarioKind::Grassland, 3), 1).unwrap();
        assert_eq!(
            (
                count(&g, Role::Sheep),
                count(&g, Role::Wolf),
                count(&g, Role::Grass)
            ),
            (3, 3, 4)
        );
        let t = make_world(&ScenarioSpec::new(ScenarioKind::Tag, 3), 1).unwrap();
        assert_eq!(
            (
                count(&t, Role::Wolf),
                count(&t, Role::Sheep),
                count(&t, Role::Obstacle)
            ),
            (3, 3, 3)
        );
        let n = make_world(&ScenarioSpec::new(ScenarioKind::Navigation, 3), 1).unwrap();
        let speeds: Vec<f64> = n
            .entities
            .iter()
            .filter(|e| !e.is_static())
            .map(|e| e.max_speed)
            .collect();
        assert_eq!(speeds.iter().filter(|&&s| s > 1.0).count(), 2);
    }

    #[test]
    fn invalid_spec_is_config_error() {
        let bad = ScenarioSpec::new(ScenarioKind::Spread, 0);
        assert!(matches!(make_world(&bad, 0), Err(Error::Config(_))));
        let bad = spread().with_visibility(Some(0.0));
        assert!(matches!(make_world(&bad, 0), Err(Error::Config(_))));
        let bad = spread().with_horizon(0);
        assert!(matches!(make_world(&bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn reset_state_is_at_rest_inside_arena() {
        let w = make_world(&ScenarioSpec::new(ScenarioKind::Tag, 3), 5).unwrap();
        assert_eq!(w.step_index, 0);
        for e in &w.entities {
            assert_eq!(e.vel, Vec2::ZERO);
            assert!(e.pos.x.abs() <= 1.0 && e.pos.y.abs() <= 1.0);
        }
    }

    fn lone_agent(pos: Vec2, vel: Vec2) -> WorldState {
        let spec = ScenarioSpec::new(ScenarioKind::Spread, 1);
        let mut w = make_world(&spec, 0).unwrap();
        w.entities[0].pos = pos;
        w.entities[0].vel = vel;
        // park the landmark far away so it plays no part
        w.entities[1].pos = Vec2::new(-1.0, -1.0);
        w
    }

    #[test]
    fn zero_force_at_rest_stays_put() {
        let mut w = lone_agent(Vec2::new(0.3, -0.2), Vec2::ZERO);
        w.step(&JointAction(vec![Vec2::ZERO])).unwrap();
        assert_eq!(w.entities[0].pos, Vec2::new(0.3, -0.2));
    }

    #[test]
    fn unit_force_from_rest_matches_hand_kinematics() {
        // v = (1 - 0.25) * 0 + 1 * 3.0 * 0.1 = 0.3 ; dx = 0.3 * 0.1 = 0.03
        let mut w = lone_agent(Vec2::ZERO, Vec2::ZERO);
        w.step(&JointAction(vec![Vec2::new(1.0, 0.0)])).unwrap();
        let e = &w.entities[0];
        assert!((e.vel.x - 0.3).abs() < 1e-15 && e.vel.y == 0.0);
        assert!((e.pos.x - 0.03).abs() < 1e-15 && e.pos.y == 0.0);
    }

    #[test]
    fn wall_clamps_position() {
        let mut w = lone_agent(Vec2::new(1.0, 0.0), Vec2::new(0.8, 0.0));
        w.step(&JointAction(vec![Vec2::new(1.0, 0.0)])).unwrap();
        assert_eq!(w.entities[0].pos.x, 1.0);
    }

    #[test]
    fn action_count_mismatch_is_contract_violation() {
        let mut w = make_world(&spread(), 0).unwrap();
        assert!(matches!(
            w.step(&JointAction(vec![Vec2::ZERO])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn done_exactly_at_horizon() {
        let mut w = make_world(&spread().with_horizon(3), 0).unwrap();
        let a = JointAction(vec![Vec2::ZERO; 3]);
        assert!(!w.step(&a).unwrap().done);
        assert!(!w.step(&a).unwrap().done);
        assert!(w.step(&a).unwrap().done);
        assert!(w.step(&a).is_err());
    }

    #[test]
    fn sheep_outrun_wolves() {
        let p = Physics::default();
        assert!(p.sheep.max_speed > p.wolf.max_speed);
    }

    #[test]
    fn overlapping_agents_are_pushed_apart() {
        let mut w = make_world(&ScenarioSpec::new(ScenarioKind::Spread, 2), 0).unwrap();
        w.entities[0].pos = Vec2::new(0.0, 0.0);
        w.entities[1].pos = Vec2::new(0.05, 0.0);
        w.step(&JointAction(vec![Vec2::ZERO; 2])).unwrap();
        assert!(w.entities[0].vel.x < 0.0 && w.entities[1].vel.x > 0.0);
    }

    #[test]
    fn grass_respawns_when_eaten() {
        let mut w = make_world(&ScenarioSpec::new(ScenarioKind::Grassland, 1), 3).unwrap();
        let sheep = w
            .entities
            .iter()
            .find(|e| e.role == Role::Sheep)
            .unwrap()
            .id;
        let grass = w
            .entities
            .iter()
            .find(|e| e.role == Role::Grass)
            .unwrap()
            .id;
        let wolf = w.entities.iter().find(|e| e.role == Role::Wolf).unwrap().id;
        let at = Vec2::new(0.5, 0.5);
        w.entities[grass].pos = at;
        w.entities[sheep].pos = at;
        w.entities[wolf].pos = Vec2::new(-0.9, -0.9);
        let out = w.step(&JointAction(vec![Vec2::ZERO; 2])).unwrap();
        assert_eq!(w.events.grass_eaten, vec![(sheep, grass)]);
        assert_ne!(w.entities[grass].pos, at);
        assert_eq!(
            w.entities.iter().filter(|e| e.role == Role::Grass).count(),
            4
        );
        // training: +2 for the grass, minus shaping toward the nearest (respawned) grass
        let sheep_slot = w.agent_ids().iter().position(|&i| i == sheep).unwrap();
        assert!(out.scoring[sheep_slot] >= 3.0 - 1e-12);
    }
}
