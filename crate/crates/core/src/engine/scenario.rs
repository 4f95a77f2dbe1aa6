use serde::{Deserialize, Serialize};

use super::Role;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Spread,
    Adversary,
    Grassland,
    Navigation,
    Tag,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Spread,
        ScenarioKind::Adversary,
        ScenarioKind::Grassland,
        ScenarioKind::Navigation,
        ScenarioKind::Tag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Spread => "spread",
            ScenarioKind::Adversary => "adversary",
            ScenarioKind::Grassland => "grassland",
            ScenarioKind::Navigation => "navigation",
            ScenarioKind::Tag => "tag",
        }
    }

    /// Learning roles present in the scenario, in entity order.
    pub fn agent_roles(self) -> &'static [Role] {
        match self {
            ScenarioKind::Spread | ScenarioKind::Navigation => &[Role::Agent],
            _ => &[Role::Wolf, Role::Sheep],
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown scenario `{s}`")))
    }
}

/// Movement limits of one kind of mobile body.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Body {
    pub radius: f64,
    pub accel: f64,
    pub max_speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Physics {
    pub dt: f64,
    pub damping: f64,
    /// Spring constant of the soft-collision penalty force.
    pub contact_stiffness: f64,
    pub agent: Body,
    /// The single slow agent of Navigation.
    pub slow_agent: Body,
    pub fast_agent: Body,
    pub wolf: Body,
    pub sheep: Body,
    pub landmark_radius: f64,
    pub grass_radius: f64,
    pub obstacle_radius: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            dt: 0.1,
            damping: 0.25,
            contact_stiffness: 20.0,
            agent: Body {
                radius: 0.1,
                accel: 3.0,
                max_speed: 1.0,
            },
            fast_agent: Body {
                radius: 0.1,
                accel: 4.0,
                max_speed: 1.3,
            },
            slow_agent: Body {
                radius: 0.1,
                accel: 2.0,
                max_speed: 0.7,
            },
            wolf: Body {
                radius: 0.075,
                accel: 3.0,
                max_speed: 1.0,
            },
            sheep: Body {
                radius: 0.05,
                accel: 4.0,
                max_speed: 1.3,
            },
            landmark_radius: 0.05,
            grass_radius: 0.05,
            obstacle_radius: 0.15,
        }
    }
}

/// Reward constants for one mode. Penalties are stored with their sign.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSet {
    /// Per landmark occupied (Spread: per agent; Navigation: team total shared equally).
    pub landmark: f64,
    /// To a wolf per sheep it catches (Tag: to every wolf per catch).
    pub catch: f64,
    /// To a sheep per wolf catching it (Tag: to every sheep per catch).
    pub caught: f64,
    /// To a sheep per grass it consumes.
    pub grass: f64,
    /// Coefficient on an agent's distance to its nearest landmark.
    pub agent_shaping: f64,
    /// Coefficient on a wolf's distance to its nearest sheep.
    pub wolf_shaping: f64,
    /// Coefficient on a sheep's distance to its nearest grass.
    pub sheep_shaping: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConstants {
    pub training: RewardSet,
    pub scoring: RewardSet,
}

impl RewardConstants {
    pub fn for_kind(kind: ScenarioKind) -> Self {
        let zero = RewardSet {
            landmark: 0.0,
            catch: 0.0,
            caught: 0.0,
            grass: 0.0,
            agent_shaping: 0.0,
            wolf_shaping: 0.0,
            sheep_shaping: 0.0,
        };
        match kind {
            ScenarioKind::Spread => RewardConstants {
                training: RewardSet {
                    landmark: 100.0,
                    agent_shaping: 0.2,
                    ..zero
                },
                scoring: RewardSet {
                    landmark: 5.0,
                    ..zero
                },
            },
            ScenarioKind::Adversary => RewardConstants {
                training: RewardSet {
                    catch: 100.0,
                    caught: -100.0,
                    wolf_shaping: 0.2,
                    ..zero
                },
                scoring: RewardSet {
                    catch: 5.0,
                    caught: -5.0,
                    ..zero
                },
            },
            ScenarioKind::Grassland => RewardConstants {
                training: RewardSet {
                    catch: 5.0,
                    caught: -5.0,
                    grass: 2.0,
                    wolf_shaping: 0.2,
                    sheep_shaping: 0.2,
                    ..zero
                },
                scoring: RewardSet {
                    catch: 5.0,
                    caught: -5.0,
                    grass: 3.0,
                    ..zero
                },
            },
            ScenarioKind::Navigation => {
                let set = RewardSet {
                    landmark: 5.0,
                    ..zero
                };
                RewardConstants {
                    training: set,
                    scoring: set,
                }
            }
            ScenarioKind::Tag => {
                let set = RewardSet {
                    catch: 5.0,
                    caught: -5.0,
                    ..zero
                };
                RewardConstants {
                    training: set,
                    scoring: set,
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n_per_side: usize,
    pub horizon: usize,
    pub visibility_radius: Option<f64>,
    pub rewards: RewardConstants,
    pub physics: Physics,
}

pub const GRASS_COUNT: usize = 4;
pub const OBSTACLE_COUNT: usize = 3;
pub const DEFAULT_HORIZON: usize = 200;

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, n_per_side: usize) -> Self {
        Self {
            kind,
            n_per_side,
            horizon: DEFAULT_HORIZON,
            visibility_radius: None,
            rewards: RewardConstants::for_kind(kind),
            physics: Physics::default(),
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_visibility(mut self, radius: Option<f64>) -> Self {
        self.visibility_radius = radius;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_side == 0 {
            return Err(Error::config("n_per_side must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if let Some(r) = self.visibility_radius {
            if !(r > 0.0) {
                return Err(Error::config("visibility_radius must be positive"));
            }
        }
        let p = &self.physics;
        if !(p.dt > 0.0) || !(0.0..1.0).contains(&p.damping) {
            return Err(Error::config("physics needs dt > 0 and damping in [0, 1)"));
        }
        Ok(())
    }

    /// Roles of every entity in world order: mobile entities first, then static ones.
    pub fn layout(&self) -> Vec<Role> {
        let n = self.n_per_side;
        let mut roles = Vec::new();
        match self.kind {
            ScenarioKind::Spread | ScenarioKind::Navigation => {
                roles.extend(std::iter::repeat_n(Role::Agent, n));
                roles.extend(std::iter::repeat_n(Role::Landmark, n));
            }
            ScenarioKind::Adversary => {
                roles.extend(std::iter::repeat_n(Role::Wolf, n));
                roles.extend(std::iter::repeat_n(Role::Sheep, n));
            }
            ScenarioKind::Grassland => {
                roles.extend(std::iter::repeat_n(Role::Wolf, n));
                roles.extend(std::iter::repeat_n(Role::Sheep, n));
                roles.extend(std::iter::repeat_n(Role::Grass, GRASS_COUNT));
            }
            ScenarioKind::Tag => {
                roles.extend(std::iter::repeat_n(Role::Wolf, n));
                roles.extend(std::iter::repeat_n(Role::Sheep, n));
                roles.extend(std::iter::repeat_n(Role::Obstacle, OBSTACLE_COUNT));
            }
        }
        roles
    }

    /// Number of mobile (action-taking) entities.
    pub fn num_agents(&self) -> usize {
        self.layout().iter().filter(|r| !r.is_static()).count()
    }
}
