use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    agent_roles, episode_composition, mean_stderr, run_episodes, run_tournament, AgentPool,
    MatchReport, PoolEntry, TournamentConfig,
};
use crate::engine::{Role, ScenarioKind, ScenarioSpec};
use crate::error::{Error, Result};
use crate::par::derive_seed;

const SWEEP_STREAM: u64 = 0x5E;

/// Pools for one team size of a sweep.
#[derive(Clone, Debug)]
pub struct SweepScale {
    pub scale: usize,
    /// Agents every slot is drawn from by default.
    pub baseline: AgentPool,
    /// Inverse-attention agents for the swept role.
    pub inverse: Vec<PoolEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub scale: usize,
    pub inverse_count: usize,
    /// Mean per-episode team total of the swept role.
    pub team_mean: f64,
    pub team_stderr: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub scenario: String,
    pub role: Role,
    pub cells: Vec<SweepCell>,
    /// Per scale: whether team reward never decreases as inverse agents are added.
    pub monotone: Vec<(usize, bool)>,
}

impl SweepReport {
    pub fn cell(&self, scale: usize, count: usize) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.scale == scale && c.inverse_count == count)
    }

    /// Rows are scales, columns the number of inverse-attention agents.
    pub fn table(&self) -> String {
        let max = self
            .cells
            .iter()
            .map(|c| c.inverse_count)
            .max()
            .unwrap_or(0);
        let mut s = format!("{} ({})\n{:<6}", self.scenario, self.role.name(), "N");
        for c in 0..=max {
            s.push_str(&format!(" {:>18}", format!("#inverse={c}")));
        }
        s.push('\n');
        for &(scale, monotone) in &self.monotone {
            s.push_str(&format!("{scale:<6}"));
            for c in 0..=max {
                match self.cell(scale, c) {
                    Some(x) => s.push_str(&format!(
                        " {:>18}",
                        format!("{:.2} ± {:.2}", x.team_mean, x.team_stderr)
                    )),
                    None => s.push_str(&format!(" {:>18}", "-")),
                }
            }
            s.push_str(if monotone {
                "  monotone\n"
            } else {
                "  non-monotone\n"
            });
        }
        s
    }
}

/// Team reward of `role` as `0..=scale` of its slots are switched to
/// inverse-attention agents. The remaining slots keep the composition a
/// baseline-only tournament with the same seed would draw, so the zero
/// column reproduces that tournament.
pub fn multi_inverse_sweep(
    kind: ScenarioKind,
    role: Role,
    scales: &[SweepScale],
    config: &TournamentConfig,
) -> Result<SweepReport> {
    let mut cells = Vec::new();
    let mut monotone = Vec::new();
    for s in scales {
        let spec = ScenarioSpec::new(kind, s.scale);
        s.baseline.validate(&spec)?;
        if s.inverse.is_empty() || s.inverse.iter().any(|e| e.role != role) {
            return Err(Error::config(format!(
                "scale {} needs inverse entries for role {}",
                s.scale,
                role.name()
            )));
        }
        let mut pool = s.baseline.clone();
        let offset = pool.entries.len();
        pool.entries.extend(s.inverse.iter().cloned());
        pool.validate(&spec)?;
        let slots: Vec<usize> = agent_roles(&spec)
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(a, _)| a)
            .collect();
        let base = (0..config.episodes)
            .map(|e| episode_composition(&s.baseline, &spec, config.seed, e))
            .collect::<Result<Vec<_>>>()?;
        let mut means = Vec::new();
        for count in 0..=slots.len().min(s.scale) {
            let comps: Vec<Vec<usize>> = base
                .iter()
                .enumerate()
                .map(|(e, comp)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        config.seed ^ SWEEP_STREAM,
                        (e * 64 + count) as u64,
                    ));
                    let mut comp = comp.clone();
                    for i in sample(&mut rng, slots.len(), count) {
                        comp[slots[i]] = offset + rng.random_range(0..s.inverse.len());
                    }
                    comp
                })
                .collect();
            let log = run_episodes(&pool, &spec, &comps, 0, config)?;
            let team: Vec<f64> = log
                .iter()
                .map(|ep| slots.iter().map(|&a| ep.rewards[a]).sum())
                .collect();
            let (team_mean, team_stderr) = mean_stderr(&team);
            means.push(team_mean);
            cells.push(SweepCell {
                scale: s.scale,
                inverse_count: count,
                team_mean,
                team_stderr,
                episodes: log.len(),
            });
        }
        monotone.push((s.scale, means.windows(2).all(|w| w[1] >= w[0])));
    }
    Ok(SweepReport {
        scenario: kind.name().to_string(),
        role,
        cells,
        monotone,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialObsRow {
    /// `None` is full observability.
    pub radius: Option<f64>,
    pub mean_visible: f64,
    pub report: MatchReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialObsReport {
    pub rows: Vec<PartialObsRow>,
}

impl PartialObsReport {
    /// Rows are radii, columns method means for each role.
    pub fn table(&self) -> String {
        let mut cols: Vec<(String, Role)> = Vec::new();
        for row in &self.rows {
            for r in &row.report.rows {
                if !cols.iter().any(|(m, ro)| *m == r.method && *ro == r.role) {
                    cols.push((r.method.clone(), r.role));
                }
            }
        }
        let mut s = format!("{:<8} {:>8}", "radius", "visible");
        for (m, r) in &cols {
            s.push_str(&format!(" {:>20}", format!("{m}/{}", r.name())));
        }
        s.push('\n');
        for row in &self.rows {
            let radius = row.radius.map_or("full".to_string(), |r| format!("{r}"));
            s.push_str(&format!("{radius:<8} {:>8.3}", row.mean_visible));
            for (m, r) in &cols {
                match row.report.row(m, *r) {
                    Some(x) => s.push_str(&format!(
                        " {:>20}",
                        format!("{:.2} ± {:.2}", x.mean, x.stderr)
                    )),
                    None => s.push_str(&format!(" {:>20}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Tournaments with the scenario's visibility radius set to each of `radii`.
pub fn partial_obs_eval(
    pool: &AgentPool,
    spec: &ScenarioSpec,
    radii: &[Option<f64>],
    config: &TournamentConfig,
) -> Result<PartialObsReport> {
    let rows = radii
        .iter()
        .map(|&radius| {
            let report = run_tournament(pool, &spec.clone().with_visibility(radius), config)?;
            Ok(PartialObsRow {
                radius,
                mean_visible: report.mean_visible(),
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PartialObsReport { rows })
}
