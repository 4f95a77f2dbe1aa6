//! Human-play sessions: the JSON protocol and a transport-free session core.
//!
//! A transport feeds client keys into a [`Mailbox`] and calls
//! [`PlaySession::tick`] at a fixed rate; each tick consumes at most one key.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Encoder, ObsDims};
use crate::engine::{make_world, JointAction, Role, ScenarioKind, ScenarioSpec, Vec2, WorldState};
use crate::error::{Error, Result};
use crate::evaluation::{agent_roles, lineup_forces, AgentPool, Controller, PoolEntry};
use crate::gradfield::GradientFields;
use crate::par::derive_seed;

pub const PROTOCOL_VERSION: u32 = 1;
pub const HUMAN_METHOD: &str = "human";

const WORLD_STREAM: u64 = 0x91;
const RANDOM_STREAM: u64 = 0x92;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Key {
    Up,
    Down,
    Left,
    Right,
    #[default]
    None,
}

impl Key {
    /// Unit force for the key.
    pub fn force(self) -> Vec2 {
        match self {
            Key::Up => Vec2::new(0.0, 1.0),
            Key::Down => Vec2::new(0.0, -1.0),
            Key::Left => Vec2::new(-1.0, 0.0),
            Key::Right => Vec2::new(1.0, 0.0),
            Key::None => Vec2::ZERO,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMsg {
    Join { role: Role, version: u32 },
    Action { key: Key },
}

impl ClientMsg {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Protocol(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityView {
    pub id: usize,
    pub role: Role,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

/// Messages from the server. None of them names the method behind an agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMsg {
    Welcome {
        version: u32,
        scenario: ScenarioKind,
        n_per_side: usize,
        role: Role,
        agent_id: usize,
        episodes: usize,
        steps: usize,
        tick_hz: f64,
    },
    State {
        tick: u64,
        step: usize,
        episode: usize,
        entities: Vec<EntityView>,
        /// Running scoring-mode reward per agent id.
        scores: BTreeMap<String, f64>,
    },
    EpisodeEnd {
        episode: usize,
        rewards: BTreeMap<String, f64>,
    },
    Error {
        message: String,
    },
}

impl ServerMsg {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }

    pub fn error(message: impl Into<String>) -> Self {
        ServerMsg::Error {
            message: message.into(),
        }
    }
}

/// Single-slot, last-write-wins key mailbox between the receive loop and the tick loop.
#[derive(Debug, Default)]
pub struct Mailbox(Mutex<Option<Key>>);

impl Mailbox {
    pub fn post(&self, key: Key) {
        *self.0.lock().expect("mailbox lock") = Some(key);
    }

    /// Empties the slot.
    pub fn take(&self) -> Option<Key> {
        self.0.lock().expect("mailbox lock").take()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlayConfig {
    pub episodes: usize,
    pub steps: usize,
    pub tick_hz: f64,
    pub seed: u64,
}

impl Default for PlayConfig {
    fn default() -> Self {
        Self {
            episodes: 5,
            steps: 100,
            tick_hz: 10.0,
            seed: 0,
        }
    }
}

impl PlayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.steps == 0 || !(self.tick_hz > 0.0) {
            return Err(Error::config(
                "play.episodes, play.steps and play.tick_hz must be positive",
            ));
        }
        Ok(())
    }

    pub fn tick_interval(&self) -> std::time::Duration {
        std::time::Duration::from_secs_f64(1.0 / self.tick_hz)
    }
}

/// Who plays alongside and against the human.
#[derive(Clone, Debug)]
pub struct PlaySetup {
    pub spec: ScenarioSpec,
    pub human_role: Role,
    /// Same-role agents; rotated across episodes.
    pub teammates: Vec<PoolEntry>,
    /// Agents for every other role.
    pub opponents: Vec<PoolEntry>,
    pub fields: GradientFields,
    pub config: PlayConfig,
}

impl PlaySetup {
    fn session_spec(&self) -> ScenarioSpec {
        self.spec.clone().with_horizon(self.config.steps)
    }

    fn pool(&self) -> AgentPool {
        let entries = self
            .teammates
            .iter()
            .chain(&self.opponents)
            .cloned()
            .collect();
        AgentPool::new(entries, self.fields.clone())
    }

    /// The human drives the first agent of their role.
    pub fn human_agent(&self) -> Result<usize> {
        agent_roles(&self.spec)
            .iter()
            .position(|r| *r == self.human_role)
            .ok_or_else(|| {
                Error::config(format!(
                    "{} has no {} agents",
                    self.spec.kind.name(),
                    self.human_role.name()
                ))
            })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let spec = self.session_spec();
        spec.validate()?;
        self.human_agent()?;
        for e in &self.teammates {
            if e.role != self.human_role {
                return Err(Error::config(format!(
                    "teammate `{}` plays {}, the human plays {}",
                    e.method,
                    e.role.name(),
                    self.human_role.name()
                )));
            }
        }
        for e in &self.opponents {
            if e.role == self.human_role {
                return Err(Error::config(format!(
                    "opponent `{}` shares the human's role",
                    e.method
                )));
            }
        }
        for e in self.teammates.iter().chain(&self.opponents) {
            if let Controller::Policy(b) = &e.controller {
                let m = &b.meta;
                if m.scenario != spec.kind
                    || m.n_per_side != spec.n_per_side
                    || m.role != e.role
                    || m.dims != ObsDims::new(&spec, e.role)
                {
                    return Err(Error::config(format!(
                        "checkpoint `{}` was built for {} N={} ({}), not this session",
                        e.method,
                        m.scenario.name(),
                        m.n_per_side,
                        m.role.name()
                    )));
                }
            }
        }
        self.lineup(0).map(|_| ())
    }

    /// Pool index driving each agent in episode `e`; `None` is the human.
    pub fn lineup(&self, episode: usize) -> Result<Vec<Option<usize>>> {
        let human = self.human_agent()?;
        let offset = self.teammates.len();
        let mut seen: BTreeMap<Role, usize> = BTreeMap::new();
        agent_roles(&self.spec)
            .into_iter()
            .enumerate()
            .map(|(a, role)| {
                if a == human {
                    return Ok(None);
                }
                let j = seen.entry(role).or_insert(0);
                let slot = *j;
                *j += 1;
                if role == self.human_role {
                    if self.teammates.is_empty() {
                        return Err(Error::config("the session needs teammate checkpoints"));
                    }
                    Ok(Some((episode + slot) % self.teammates.len()))
                } else {
                    let c: Vec<usize> = (0..self.opponents.len())
                        .filter(|&i| self.opponents[i].role == role)
                        .collect();
                    if c.is_empty() {
                        return Err(Error::config(format!(
                            "the session needs {} checkpoints",
                            role.name()
                        )));
                    }
                    Ok(Some(offset + c[slot % c.len()]))
                }
            })
            .collect()
    }

    /// Checks a join handshake and answers with the welcome message.
    pub fn accept_join(&self, msg: &ClientMsg) -> Result<ServerMsg> {
        let ClientMsg::Join { role, version } = msg else {
            return Err(Error::Protocol("expected a join message first".into()));
        };
        if *version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!(
                "protocol version {version} unsupported, server speaks {PROTOCOL_VERSION}"
            )));
        }
        if *role != self.human_role {
            return Err(Error::Protocol(format!(
                "this session seats a {}, not a {}",
                self.human_role.name(),
                role.name()
            )));
        }
        Ok(ServerMsg::Welcome {
            version: PROTOCOL_VERSION,
            scenario: self.spec.kind,
            n_per_side: self.spec.n_per_side,
            role: self.human_role,
            agent_id: self.human_agent()?,
            episodes: self.config.episodes,
            steps: self.config.steps,
            tick_hz: self.config.tick_hz,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub world_seed: u64,
    pub lineup: Vec<Option<usize>>,
    pub methods: Vec<String>,
    pub roles: Vec<Role>,
    /// Key applied to the human at every step taken.
    pub keys: Vec<Key>,
    /// Scoring-mode reward per agent.
    pub rewards: Vec<f64>,
    pub method_rewards: BTreeMap<String, f64>,
    /// False when the client left mid-episode.
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub version: u32,
    pub scenario: ScenarioKind,
    pub n_per_side: usize,
    pub human_role: Role,
    pub human_agent: usize,
    pub seed: u64,
    pub steps: usize,
    pub episodes: Vec<EpisodeLog>,
}

struct EpisodeRun {
    episode: usize,
    world_seed: u64,
    world: WorldState,
    lineup: Vec<Option<usize>>,
    rng: ChaCha8Rng,
    totals: Vec<f64>,
    keys: Vec<Key>,
}

impl EpisodeRun {
    fn start(setup: &PlaySetup, spec: &ScenarioSpec, episode: usize) -> Result<Self> {
        let seed = setup.config.seed;
        let world_seed = derive_seed(seed ^ WORLD_STREAM, episode as u64);
        let world = make_world(spec, world_seed)?;
        let n = world.num_agents();
        Ok(Self {
            episode,
            world_seed,
            world,
            lineup: setup.lineup(episode)?,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed ^ RANDOM_STREAM, episode as u64)),
            totals: vec![0.0; n],
            keys: Vec::new(),
        })
    }

    fn step(
        &mut self,
        pool: &AgentPool,
        encoder: &Encoder,
        human: usize,
        key: Key,
    ) -> Result<bool> {
        let mut forces = lineup_forces(pool, encoder, &self.world, &self.lineup, &mut self.rng)?;
        forces[human] = key.force();
        let out = self.world.step(&JointAction(forces))?;
        for (t, r) in self.totals.iter_mut().zip(&out.scoring) {
            *t += r;
        }
        self.keys.push(key);
        Ok(self.world.is_done())
    }

    fn log(&self, pool: &AgentPool, spec: &ScenarioSpec, complete: bool) -> EpisodeLog {
        let methods: Vec<String> = self
            .lineup
            .iter()
            .map(|s| s.map_or(HUMAN_METHOD.to_string(), |k| pool.entries[k].method.clone()))
            .collect();
        let mut method_rewards = BTreeMap::new();
        for (m, r) in methods.iter().zip(&self.totals) {
            *method_rewards.entry(m.clone()).or_insert(0.0) += r;
        }
        EpisodeLog {
            episode: self.episode,
            world_seed: self.world_seed,
            lineup: self.lineup.clone(),
            methods,
            roles: agent_roles(spec),
            keys: self.keys.clone(),
            rewards: self.totals.clone(),
            method_rewards,
            complete,
        }
    }

    fn by_agent(&self) -> BTreeMap<String, f64> {
        self.totals
            .iter()
            .enumerate()
            .map(|(a, r)| (self.world.agent_ids()[a].to_string(), *r))
            .collect()
    }
}

/// One human's run of consecutive episodes.
pub struct PlaySession {
    setup: PlaySetup,
    spec: ScenarioSpec,
    pool: AgentPool,
    encoder: Encoder,
    human: usize,
    run: Option<EpisodeRun>,
    tick: u64,
    log: SessionLog,
}

impl PlaySession {
    pub fn new(setup: PlaySetup) -> Result<Self> {
        setup.validate()?;
        let spec = setup.session_spec();
        let pool = setup.pool();
        let encoder = Encoder::new(&spec, setup.fields.clone());
        let human = setup.human_agent()?;
        let run = Some(EpisodeRun::start(&setup, &spec, 0)?);
        let log = SessionLog {
            version: PROTOCOL_VERSION,
            scenario: spec.kind,
            n_per_side: spec.n_per_side,
            human_role: setup.human_role,
            human_agent: human,
            seed: setup.config.seed,
            steps: setup.config.steps,
            episodes: Vec::new(),
        };
        Ok(Self {
            setup,
            spec,
            pool,
            encoder,
            human,
            run,
            tick: 0,
            log,
        })
    }

    pub fn setup(&self) -> &PlaySetup {
        &self.setup
    }

    pub fn is_finished(&self) -> bool {
        self.run.is_none()
    }

    /// Snapshot of the running episode.
    pub fn state(&self) -> Option<ServerMsg> {
        let run = self.run.as_ref()?;
        Some(ServerMsg::State {
            tick: self.tick,
            step: run.world.step_index,
            episode: run.episode,
            entities: run
                .world
                .entities
                .iter()
                .map(|e| EntityView {
                    id: e.id,
                    role: e.role,
                    x: e.pos.x,
                    y: e.pos.y,
                    vx: e.vel.x,
                    vy: e.vel.y,
                })
                .collect(),
            scores: run.by_agent(),
        })
    }

    /// Advances one step with `key` (or no force) for the human. Returns the new
    /// state, plus `episode_end` and the next episode's opening state when the
    /// episode finishes.
    pub fn tick(&mut self, key: Option<Key>) -> Result<Vec<ServerMsg>> {
        let run = self
            .run
            .as_mut()
            .ok_or_else(|| Error::Protocol("session already finished".into()))?;
        let done = run.step(
            &self.pool,
            &self.encoder,
            self.human,
            key.unwrap_or_default(),
        )?;
        self.tick += 1;
        let mut out = vec![self.state().expect("episode running")];
        if done {
            let run = self.run.take().expect("episode running");
            out.push(ServerMsg::EpisodeEnd {
                episode: run.episode,
                rewards: run.by_agent(),
            });
            self.log
                .episodes
                .push(run.log(&self.pool, &self.spec, true));
            let next = run.episode + 1;
            if next < self.setup.config.episodes {
                self.run = Some(EpisodeRun::start(&self.setup, &self.spec, next)?);
                out.extend(self.state());
            }
        }
        Ok(out)
    }

    /// Ends the session early; a running episode is logged as incomplete.
    pub fn abort(&mut self) {
        if let Some(run) = self.run.take() {
            log::warn!(
                "play session aborted in episode {} at step {}",
                run.episode,
                run.world.step_index
            );
            self.log
                .episodes
                .push(run.log(&self.pool, &self.spec, false));
        }
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn into_log(self) -> SessionLog {
        self.log
    }
}

/// Re-simulates every logged episode from its seed and recorded keys and
/// returns the per-agent scoring rewards.
pub fn replay(setup: &PlaySetup, log: &SessionLog) -> Result<Vec<Vec<f64>>> {
    setup.validate()?;
    if log.seed != setup.config.seed || log.steps != setup.config.steps {
        return Err(Error::config("session log does not match the play setup"));
    }
    let spec = setup.session_spec();
    let pool = setup.pool();
    let encoder = Encoder::new(&spec, setup.fields.clone());
    let human = setup.human_agent()?;
    log.episodes
        .iter()
        .map(|ep| {
            let mut run = EpisodeRun::start(setup, &spec, ep.episode)?;
            if run.world_seed != ep.world_seed || run.lineup != ep.lineup {
                return Err(Error::config(format!(
                    "episode {} was played with a different lineup or seed",
                    ep.episode
                )));
            }
            for &key in &ep.keys {
                run.step(&pool, &encoder, human, key)?;
            }
            Ok(run.totals)
        })
        .collect()
}
