use std::path::Path;

use serde::{Deserialize, Serialize};

use super::play::PlayConfig;
use crate::engine::{ScenarioKind, ScenarioSpec, DEFAULT_HORIZON};
use crate::error::{Error, Result};
use crate::evaluation::TournamentConfig;
use crate::gradfield::{NoiseSchedule, ScoreTrainConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub n_per_side: usize,
    pub horizon: usize,
    /// Absent means full observability.
    pub visibility_radius: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Spread,
            n_per_side: 2,
            horizon: DEFAULT_HORIZON,
            visibility_radius: None,
        }
    }
}

impl ScenarioConfig {
    pub fn spec(&self) -> Result<ScenarioSpec> {
        let spec = ScenarioSpec::new(self.kind, self.n_per_side)
            .with_horizon(self.horizon)
            .with_visibility(self.visibility_radius);
        spec.validate()?;
        Ok(spec)
    }
}

/// Everything one run of the toolkit can be configured with. Every table and
/// key is optional; absent ones take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub noise: NoiseSchedule,
    pub score: ScoreTrainConfig,
    pub train: TrainConfig,
    pub eval: TournamentConfig,
    pub play: PlayConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.spec()?;
        self.noise.validate()?;
        self.train.validate()?;
        self.play.validate()?;
        if self.score.batch_size == 0 || self.score.hidden == 0 || !(self.score.lr > 0.0) {
            return Err(Error::config(
                "score.batch_size, score.hidden and score.lr must be positive",
            ));
        }
        if self.eval.episodes == 0 || self.eval.steps == 0 || self.eval.chunk == 0 {
            return Err(Error::config(
                "eval.episodes, eval.steps and eval.chunk must be positive",
            ));
        }
        Ok(())
    }

    /// The effective configuration, as TOML.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Reads, validates and logs the effective configuration.
pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let config = RunConfig::from_toml(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    log::info!(
        "effective configuration from {}:\n{}",
        path.display(),
        config.echo()
    );
    Ok(config)
}
