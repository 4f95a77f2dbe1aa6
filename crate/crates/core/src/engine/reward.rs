use serde::{Deserialize, Serialize};

use super::{EntityState, Role, ScenarioKind, WorldState};

/// Which constant set a reward is computed with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Shaped rewards used for optimization.
    Training,
    /// Point values used for evaluation and reporting.
    Scoring,
}

fn touching(a: &EntityState, b: &EntityState) -> bool {
    a.pos.distance(b.pos) < a.radius + b.radius
}

fn min_distance<'a>(from: &EntityState, to: impl Iterator<Item = &'a EntityState>) -> f64 {
    let d = to
        .map(|e| from.pos.distance(e.pos))
        .fold(f64::INFINITY, f64::min);
    if d.is_finite() {
        d
    } else {
        0.0
    }
}

pub(super) fn compute(world: &WorldState, mode: RewardMode) -> Vec<f64> {
    let set = match mode {
        RewardMode::Training => world.spec.rewards.training,
        RewardMode::Scoring => world.spec.rewards.scoring,
    };
    let ents = &world.entities;
    let of_role = |r: Role| ents.iter().filter(move |e| e.role == r);
    let agents: Vec<&EntityState> = world.agent_ids().iter().map(|&i| &ents[i]).collect();

    match world.spec.kind {
        ScenarioKind::Spread => agents
            .iter()
            .map(|a| {
                let occupies = of_role(Role::Landmark).any(|l| touching(a, l));
                let mut r = if occupies { set.landmark } else { 0.0 };
                if set.agent_shaping != 0.0 {
                    r -= set.agent_shaping * min_distance(a, of_role(Role::Landmark));
                }
                r
            })
            .collect(),
        ScenarioKind::Navigation => {
            let occupied = of_role(Role::Landmark)
                .filter(|l| agents.iter().any(|a| touching(a, l)))
                .count() as f64;
            let share = set.landmark * occupied / agents.len() as f64;
            agents
                .iter()
                .map(|a| {
                    let mut r = share;
                    if set.agent_shaping != 0.0 {
                        r -= set.agent_shaping * min_distance(a, of_role(Role::Landmark));
                    }
                    r
                })
                .collect()
        }
        ScenarioKind::Adversary | ScenarioKind::Grassland => agents
            .iter()
            .map(|a| match a.role {
                Role::Wolf => {
                    let caught = of_role(Role::Sheep).filter(|s| touching(a, s)).count() as f64;
                    let mut r = set.catch * caught;
                    if set.wolf_shaping != 0.0 {
                        r -= set.wolf_shaping * min_distance(a, of_role(Role::Sheep));
                    }
                    r
                }
                _ => {
                    let catchers = of_role(Role::Wolf).filter(|w| touching(a, w)).count() as f64;
                    let eaten = world
                        .events
                        .grass_eaten
                        .iter()
                        .filter(|(s, _)| *s == a.id)
                        .count() as f64;
                    let mut r = set.caught * catchers + set.grass * eaten;
                    if set.sheep_shaping != 0.0 {
                        r -= set.sheep_shaping * min_distance(a, of_role(Role::Grass));
                    }
                    r
                }
            })
            .collect(),
        ScenarioKind::Tag => {
            let catches = of_role(Role::Wolf)
                .map(|w| of_role(Role::Sheep).filter(|s| touching(w, s)).count())
                .sum::<usize>() as f64;
            agents
                .iter()
                .map(|a| match a.role {
                    Role::Wolf => set.catch * catches,
                    _ => set.caught * catches,
                })
                .collect()
        }
    }
}
