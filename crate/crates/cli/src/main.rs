mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iatt_core::engine::{Role, ScenarioKind};
use iatt_core::gradfield::FieldKind;

#[derive(Parser)]
#[command(
    name = "iatt",
    version,
    about = "Inverse attention agents: goal fields, PPO training, evaluation and human play"
)]
struct Cli {
    /// TOML run configuration. Absent tables and keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an entity or boundary score network by denoising score matching.
    TrainGf {
        #[arg(long)]
        kind: FieldKind,
        /// Synthetic training points to generate.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train policies with PPO (phase 1), or continue as inverse attention (phase 3).
    Train(TrainArgs),
    /// Fit an inverse attention network on logged pairs (phase 2).
    TrainIw {
        /// Pair datasets written by `train --variant self-att`.
        #[arg(long, required = true, num_args = 1..)]
        pairs: Vec<PathBuf>,
        #[arg(long)]
        role: Role,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tournaments, rank accuracy and sweeps.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Serve a human-play session over websocket at `/session`.
    Play(PlayArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainVariant {
    /// MLP actor with a centralized critic.
    #[value(alias = "mapo")]
    Mappo,
    /// MLP actor with a decentralized critic.
    Ippo,
    SelfAtt,
    InverseAtt,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Overrides `scenario.kind`.
    #[arg(long)]
    scenario: Option<ScenarioKind>,
    /// Overrides `scenario.n_per_side`.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct FieldArgs {
    /// Entity score network checkpoint.
    #[arg(long)]
    entity_field: Option<PathBuf>,
    /// Boundary score network checkpoint.
    #[arg(long)]
    boundary_field: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    variant: TrainVariant,
    /// Phase-1 run directory whose self-attention policies inverse attention builds on.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Inverse network checkpoints, one per role.
    #[arg(long, num_args = 1..)]
    iw: Vec<PathBuf>,
    /// Overrides the phase step budget.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    fields: FieldArgs,
}

#[derive(Args)]
struct PoolArgs {
    /// Pool entry as `method=checkpoint`; repeat for more.
    #[arg(long = "entry", value_name = "METHOD=PATH")]
    entries: Vec<String>,
    /// Adds a uniform-random entry for a role.
    #[arg(long = "random", value_name = "ROLE")]
    random: Vec<Role>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Line-delimited JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    fields: FieldArgs,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Mix-and-match tournament over a pool of agents.
    Tournament {
        #[command(flatten)]
        pool: PoolArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Rank accuracy of an inverse network against logged weights.
    RankAcc {
        #[arg(long)]
        iw: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        pairs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Team reward as inverse-attention agents replace baseline agents.
    Sweep {
        #[arg(long)]
        role: Role,
        /// Baseline entry for one team size, as `N:method=checkpoint`.
        #[arg(long = "baseline", value_name = "N:METHOD=PATH", required = true)]
        baseline: Vec<String>,
        /// Inverse-attention checkpoint for one team size, as `N:checkpoint`.
        #[arg(long = "inverse", value_name = "N:PATH", required = true)]
        inverse: Vec<String>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Tournaments under shrinking visibility radii.
    PartialObs {
        #[command(flatten)]
        pool: PoolArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1.5, 1.0, 0.5])]
        radii: Vec<f64>,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Args)]
struct PlayArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    human_role: Role,
    /// Teammates as `method=checkpoint`.
    #[arg(long, value_name = "METHOD=PATH")]
    teammates: Vec<String>,
    /// Opponents as `method=checkpoint`.
    #[arg(long, value_name = "METHOD=PATH")]
    opponents: Vec<String>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Where finished session logs are written.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    #[command(flatten)]
    fields: FieldArgs,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = commands::load_config(cli.config.as_deref())?;
    match cli.command {
        Command::TrainGf { kind, samples, out } => commands::train_gf(&config, kind, samples, &out),
        Command::Train(args) => commands::train(config, args),
        Command::TrainIw { pairs, role, out } => commands::train_iw(&config, &pairs, role, &out),
        Command::Eval { command } => commands::eval(config, command),
        Command::Play(args) => commands::play(config, args),
    }
}
