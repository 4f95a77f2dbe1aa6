use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use iatt_core::agents::{CriticKind, IWNet, PolicyBundle, Variant};
use iatt_core::engine::{Role, ScenarioSpec};
use iatt_core::evaluation::{
    multi_inverse_sweep, partial_obs_eval, run_tournament, AgentPool, EpisodeRecord, MethodRow,
    PoolEntry, SweepScale, TournamentConfig,
};
use iatt_core::gradfield::{
    gen_boundary_dataset, gen_entity_dataset, train_score_net, FieldKind, GradientFields,
};
use iatt_core::io::{
    load_checkpoint, parse_config, save_checkpoint, JsonlWriter, PlaySetup, RunConfig,
    ScenarioConfig,
};
use iatt_core::training::{
    iw_fit, phase1, phase2, phase3, Learners, MetricsRecord, PairDataset, PhaseOutcome, TrainSetup,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::{
    EvalArgs, EvalCommand, FieldArgs, PlayArgs, PoolArgs, ScenarioArgs, TrainArgs, TrainVariant,
};

const MANIFEST: &str = "manifest.json";

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(parse_config(p)?),
        None => {
            let config = RunConfig::default();
            info!("effective configuration (all defaults):\n{}", config.echo());
            Ok(config)
        }
    }
}

fn scenario_spec(config: &mut RunConfig, args: &ScenarioArgs) -> Result<ScenarioSpec> {
    if let Some(kind) = args.scenario {
        config.scenario.kind = kind;
    }
    if let Some(n) = args.n {
        config.scenario.n_per_side = n;
    }
    Ok(config.scenario.spec()?)
}

fn fields(config: &RunConfig, args: &FieldArgs) -> Result<GradientFields> {
    match (&args.entity_field, &args.boundary_field) {
        (Some(e), Some(b)) => {
            let entity = load_checkpoint(e).with_context(|| format!("loading {}", e.display()))?;
            let boundary =
                load_checkpoint(b).with_context(|| format!("loading {}", b.display()))?;
            Ok(GradientFields::new(entity, boundary)?)
        }
        (None, None) => {
            warn!("no score network checkpoints given; fitting small fields from scratch");
            Ok(GradientFields::quick(config.score.seed, 2_000, 30)?)
        }
        _ => bail!("--entity-field and --boundary-field must be given together"),
    }
}

pub fn train_gf(config: &RunConfig, kind: FieldKind, samples: usize, out: &Path) -> Result<()> {
    let data = match kind {
        FieldKind::Entity => gen_entity_dataset(samples, config.score.seed)?,
        FieldKind::Boundary => gen_boundary_dataset(samples, config.score.seed)?,
        FieldKind::Generic => bail!("only entity and boundary fields have built-in datasets"),
    };
    let (net, report) = train_score_net(&data, &config.noise, &config.score)?;
    save_checkpoint(&net, out)?;
    info!(
        "{} field: {} epochs, final loss {:.5}, saved to {}",
        kind.name(),
        report.epoch_losses.len(),
        report.last(),
        out.display()
    );
    Ok(())
}

/// What a training run leaves in its output directory.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    scenario: ScenarioConfig,
    variant: Variant,
    critic: CriticKind,
    assignment: Vec<usize>,
    policies: Vec<String>,
    pairs: Vec<String>,
    steps: usize,
    updates: usize,
    converged: bool,
    warning: Option<String>,
    history: Vec<f64>,
}

fn write_run(
    out: &Path,
    scenario: &ScenarioConfig,
    critic: CriticKind,
    outcome: &PhaseOutcome,
    datasets: &[PairDataset],
) -> Result<()> {
    let mut policies = Vec::new();
    for (k, b) in outcome.learners.bundles.iter().enumerate() {
        let name = format!("policy-{k}.iatt");
        save_checkpoint(b, out.join(&name))?;
        policies.push(name);
    }
    let mut pairs = Vec::new();
    for (a, d) in datasets.iter().enumerate().filter(|(_, d)| !d.is_empty()) {
        let name = format!("pairs-{a}.json");
        std::fs::write(out.join(&name), serde_json::to_vec(d)?)?;
        pairs.push(name);
    }
    let manifest = RunManifest {
        scenario: scenario.clone(),
        variant: outcome.learners.bundles[0].variant,
        critic,
        assignment: outcome.learners.assignment.clone(),
        policies,
        pairs,
        steps: outcome.steps,
        updates: outcome.updates,
        converged: outcome.converged,
        warning: outcome.warning.clone(),
        history: outcome.history.clone(),
    };
    std::fs::write(out.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    if let Some(w) = &outcome.warning {
        warn!("{w}");
    }
    info!(
        "{} steps over {} updates, converged: {}; results in {}",
        outcome.steps,
        outcome.updates,
        outcome.converged,
        out.display()
    );
    Ok(())
}

fn load_run(dir: &Path, spec: &ScenarioSpec) -> Result<(RunManifest, Learners)> {
    let path = dir.join(MANIFEST);
    let manifest: RunManifest = serde_json::from_slice(
        &std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?,
    )?;
    let bundles = manifest
        .policies
        .iter()
        .map(|p| load_checkpoint::<PolicyBundle>(dir.join(p)))
        .collect::<iatt_core::Result<Vec<_>>>()?;
    let learners = Learners {
        bundles,
        assignment: manifest.assignment.clone(),
    };
    learners.validate(spec)?;
    Ok((manifest, learners))
}

pub fn train(mut config: RunConfig, args: TrainArgs) -> Result<()> {
    let spec = scenario_spec(&mut config, &args.scenario)?;
    let fields = fields(&config, &args.fields)?;
    std::fs::create_dir_all(&args.out)?;
    let mut metrics = JsonlWriter::create(args.out.join("metrics.jsonl"))?;
    let mut failed = None;
    let mut sink = |r: &MetricsRecord| {
        if let Err(e) = metrics.write(r) {
            failed.get_or_insert(e);
        }
        if let Some(s) = r.mean_score {
            info!(
                "{} update {} step {}: mean score {s:.3}",
                r.phase, r.update, r.step
            );
        }
    };
    let (variant, critic) = match args.variant {
        TrainVariant::Mappo => (Variant::MlpBaseline, CriticKind::Centralized),
        TrainVariant::Ippo => (Variant::MlpBaseline, CriticKind::Decentralized),
        TrainVariant::SelfAtt => (Variant::SelfAtt, CriticKind::Centralized),
        TrainVariant::InverseAtt => (Variant::InverseAtt, CriticKind::Centralized),
    };
    if variant == Variant::InverseAtt {
        let from = args
            .from
            .as_deref()
            .context("inverse-att continues a self-att run: pass --from <run dir>")?;
        if args.iw.is_empty() {
            bail!("inverse-att needs at least one --iw checkpoint");
        }
        let (manifest, learners) = load_run(from, &spec)?;
        if manifest.variant != Variant::SelfAtt {
            bail!(
                "{} holds {} policies, inverse-att builds on self_att",
                from.display(),
                manifest.variant.name()
            );
        }
        let iws = args
            .iw
            .iter()
            .map(|p| {
                load_checkpoint::<IWNet>(p).with_context(|| format!("loading {}", p.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(s) = args.steps {
            config.train.phase3_steps = s;
        }
        let setup = TrainSetup {
            spec,
            fields,
            variant,
            critic: manifest.critic,
        };
        let outcome = phase3(&setup, &config.train, &learners, &iws, &mut sink)?;
        drop(sink);
        if let Some(e) = failed {
            return Err(e.into());
        }
        metrics.flush()?;
        return write_run(&args.out, &config.scenario, manifest.critic, &outcome, &[]);
    }
    if args.from.is_some() || !args.iw.is_empty() {
        bail!("--from and --iw only apply to --variant inverse-att");
    }
    if let Some(s) = args.steps {
        config.train.phase1_steps = s;
    }
    let setup = TrainSetup {
        spec,
        fields,
        variant,
        critic,
    };
    let out = phase1(&setup, &config.train, &mut sink)?;
    drop(sink);
    if let Some(e) = failed {
        return Err(e.into());
    }
    metrics.flush()?;
    write_run(
        &args.out,
        &config.scenario,
        critic,
        &out.outcome,
        &out.datasets,
    )
}

fn read_pairs(paths: &[PathBuf]) -> Result<Vec<PairDataset>> {
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

pub fn train_iw(config: &RunConfig, pairs: &[PathBuf], role: Role, out: &Path) -> Result<()> {
    let data = read_pairs(pairs)?;
    let refs: Vec<&PairDataset> = data.iter().collect();
    let (iw, report) = phase2(&refs, role, &config.train.iw)?;
    save_checkpoint(&iw, out)?;
    let report_path = out.with_extension("report.json");
    std::fs::write(&report_path, serde_json::to_vec_pretty(&report)?)?;
    println!(
        "{} pairs (train {}, validation {}, test {}), {} epochs, best at {}",
        report.train + report.validation + report.test,
        report.train,
        report.validation,
        report.test,
        report.epochs_run,
        report.best_epoch
    );
    println!(
        "test mse {:.5}, uniform baseline {:.5}",
        report.test_loss, report.uniform_test_loss
    );
    for (r, a) in report.rank_accuracy.iter().enumerate() {
        println!("rank-{} accuracy {a:.4}", r + 1);
    }
    Ok(())
}

fn load_entry(spec: &str, seeds: &mut BTreeMap<(String, Role), usize>) -> Result<PoolEntry> {
    let (method, path) = spec
        .split_once('=')
        .with_context(|| format!("expected METHOD=PATH, got `{spec}`"))?;
    let bundle: PolicyBundle = load_checkpoint(path).with_context(|| format!("loading {path}"))?;
    let id = seeds
        .entry((method.to_string(), bundle.meta.role))
        .or_insert(0);
    let mut entry = PoolEntry::policy(method, *id, bundle);
    *id += 1;
    entry.source = Some(path.to_string());
    Ok(entry)
}

fn pool_entries(args: &PoolArgs) -> Result<Vec<PoolEntry>> {
    let mut seeds = BTreeMap::new();
    let mut entries = args
        .entries
        .iter()
        .map(|s| load_entry(s, &mut seeds))
        .collect::<Result<Vec<_>>>()?;
    entries.extend(args.random.iter().map(|&r| PoolEntry::random(r, 0)));
    if entries.is_empty() {
        bail!("the pool is empty: pass --entry METHOD=PATH or --random ROLE");
    }
    Ok(entries)
}

fn tournament_config(config: &RunConfig, args: &EvalArgs) -> TournamentConfig {
    let mut t = config.eval;
    if let Some(e) = args.episodes {
        t.episodes = e;
    }
    if let Some(s) = args.steps {
        t.steps = s;
    }
    if let Some(s) = args.seed {
        t.seed = s;
    }
    t
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine<'a> {
    Episode(&'a EpisodeRecord),
    Method(&'a MethodRow),
    Summary(serde_json::Value),
}

fn report_writer(
    path: &Option<PathBuf>,
) -> Result<Option<JsonlWriter<std::io::BufWriter<std::fs::File>>>> {
    Ok(match path {
        Some(p) => Some(JsonlWriter::create(p)?),
        None => None,
    })
}

pub fn eval(mut config: RunConfig, command: EvalCommand) -> Result<()> {
    match command {
        EvalCommand::Tournament { pool, eval } => {
            let spec = scenario_spec(&mut config, &eval.scenario)?;
            let pool = AgentPool::new(pool_entries(&pool)?, fields(&config, &eval.fields)?);
            let report = run_tournament(&pool, &spec, &tournament_config(&config, &eval))?;
            println!("{}", report.table());
            if let Some(mut w) = report_writer(&eval.out)? {
                for e in &report.log {
                    w.write(&ReportLine::Episode(e))?;
                }
                for r in &report.rows {
                    w.write(&ReportLine::Method(r))?;
                }
                w.flush()?;
            }
        }
        EvalCommand::RankAcc { iw, pairs, out } => {
            let net: IWNet =
                load_checkpoint(&iw).with_context(|| format!("loading {}", iw.display()))?;
            let data = read_pairs(&pairs)?;
            let entries: Vec<_> = data
                .iter()
                .flat_map(|d| d.entries())
                .filter(|e| e.raw.role == net.role)
                .collect();
            let fit = iw_fit(&net, &entries)?;
            println!(
                "{} {} pairs: mse {:.5} (uniform {:.5})",
                fit.samples,
                net.role.name(),
                fit.mse,
                fit.uniform_mse
            );
            for (r, a) in fit.rank_accuracy.iter().enumerate() {
                println!("rank-{} accuracy {a:.4}", r + 1);
            }
            if let Some(mut w) = report_writer(&out)? {
                w.write(&ReportLine::Summary(serde_json::to_value(&fit)?))?;
                w.flush()?;
            }
        }
        EvalCommand::Sweep {
            role,
            baseline,
            inverse,
            eval,
        } => {
            scenario_spec(&mut config, &eval.scenario)?;
            let fields = fields(&config, &eval.fields)?;
            let mut seeds = BTreeMap::new();
            let mut scales: BTreeMap<usize, (Vec<PoolEntry>, Vec<PoolEntry>)> = BTreeMap::new();
            for spec in &baseline {
                let (n, rest) = scale_prefix(spec)?;
                scales
                    .entry(n)
                    .or_default()
                    .0
                    .push(load_entry(rest, &mut seeds)?);
            }
            for spec in &inverse {
                let (n, path) = scale_prefix(spec)?;
                let entry = load_entry(&format!("inverse_att={path}"), &mut seeds)?;
                scales.entry(n).or_default().1.push(entry);
            }
            let scales: Vec<SweepScale> = scales
                .into_iter()
                .map(|(scale, (base, inv))| SweepScale {
                    scale,
                    baseline: AgentPool::new(base, fields.clone()),
                    inverse: inv,
                })
                .collect();
            let report = multi_inverse_sweep(
                config.scenario.kind,
                role,
                &scales,
                &tournament_config(&config, &eval),
            )?;
            println!("{}", report.table());
            if let Some(mut w) = report_writer(&eval.out)? {
                for c in &report.cells {
                    w.write(&ReportLine::Summary(serde_json::to_value(c)?))?;
                }
                w.flush()?;
            }
        }
        EvalCommand::PartialObs { pool, radii, eval } => {
            let spec = scenario_spec(&mut config, &eval.scenario)?;
            let pool = AgentPool::new(pool_entries(&pool)?, fields(&config, &eval.fields)?);
            let radii: Vec<Option<f64>> = std::iter::once(None)
                .chain(radii.into_iter().map(Some))
                .collect();
            let report =
                partial_obs_eval(&pool, &spec, &radii, &tournament_config(&config, &eval))?;
            println!("{}", report.table());
            if let Some(mut w) = report_writer(&eval.out)? {
                for row in &report.rows {
                    w.write(&ReportLine::Summary(serde_json::json!({
                        "radius": row.radius,
                        "mean_visible": row.mean_visible,
                        "methods": row.report.rows,
                    })))?;
                }
                w.flush()?;
            }
        }
    }
    Ok(())
}

fn scale_prefix(spec: &str) -> Result<(usize, &str)> {
    let (n, rest) = spec
        .split_once(':')
        .with_context(|| format!("expected N:..., got `{spec}`"))?;
    Ok((
        n.parse()
            .with_context(|| format!("bad team size in `{spec}`"))?,
        rest,
    ))
}

pub fn play(mut config: RunConfig, args: PlayArgs) -> Result<()> {
    let spec = scenario_spec(&mut config, &args.scenario)?;
    let mut seeds = BTreeMap::new();
    let mut load = |specs: &[String]| -> Result<Vec<PoolEntry>> {
        specs.iter().map(|s| load_entry(s, &mut seeds)).collect()
    };
    let setup = PlaySetup {
        spec,
        human_role: args.human_role,
        teammates: load(&args.teammates)?,
        opponents: load(&args.opponents)?,
        fields: fields(&config, &args.fields)?,
        config: config.play,
    };
    if let Some(dir) = &args.log_dir {
        std::fs::create_dir_all(dir)?;
    }
    let server = iatt_play::PlayServer::new(setup, args.log_dir)?;
    iatt_play::serve_blocking(SocketAddr::from(([0, 0, 0, 0], args.port)), server)?;
    Ok(())
}
