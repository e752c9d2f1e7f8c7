//! `netsim`: generate populations, run simulations, compare runs.

mod commands;
mod error;
mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use netsim_core::config::{Mode, OperatorKind};
use netsim_core::generate::{AgentGenParams, ClusterLayout, GraphModel};
use netsim_core::opinion::OpinionScale;

use error::{config, CliError};
use settings::{Overrides, RunFile};

#[derive(Parser)]
#[command(name = "netsim", version, about = "Topology-aware multi-agent opinion dynamics")]
struct Cli {
    /// Repeat for more log output (info, debug, trace). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph, agent profiles and a starter run file.
    Gen(GenArgs),
    /// Run a simulation and write trajectory.csv, metrics.csv and manifest.json.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Re-run a recorded simulation (a manifest file or its run directory).
        #[arg(long, conflicts_with_all = ["config", "mode", "operator", "seed", "steps", "graph", "agents", "set"])]
        from_manifest: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Compare run B against baseline run A.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Check the coordinated-update error bound on every unit of a run.
    VerifyBound {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write the PPR matrix, global influence and tiers of a graph.
    PprDump {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run file with [input] and [simulation] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    operator: Option<OperatorKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Edge-list file.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Agent profiles (JSON Lines).
    #[arg(long)]
    agents: Option<PathBuf>,
    /// Any run-file key as a dotted path, e.g. `simulation.tau=0.9`. Repeatable.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing artifacts.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    SmallWorld,
    ScaleFree,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Contiguous,
    Random,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "small-world")]
    model: ModelArg,
    #[arg(short, long)]
    n: usize,
    /// Lattice degree for small-world graphs.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Rewiring probability for small-world graphs.
    #[arg(long, default_value_t = 0.1)]
    p: f64,
    /// Edges per new node for scale-free graphs.
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Opinion cluster centers; empty for uniform opinions.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-0.7,0,0.7")]
    clusters: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    spread: f64,
    #[arg(long, value_enum, default_value = "contiguous")]
    layout: LayoutArg,
    #[arg(long, default_value_t = 0.3)]
    stubbornness_min: f64,
    #[arg(long, default_value_t = 0.4)]
    stubbornness_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

fn absolute(p: &Path) -> Result<String, CliError> {
    let abs = std::path::absolute(p).map_err(|e| config(format!("{}: {e}", p.display())))?;
    Ok(abs.display().to_string())
}

fn int(key: &str, v: u64) -> Result<i64, CliError> {
    i64::try_from(v).map_err(|_| config(format!("--{key} {v} is too large")))
}

impl RunArgs {
    fn load(&self) -> Result<RunFile, CliError> {
        let mut o = Overrides { sets: self.set.clone(), ..Default::default() };
        o.named("simulation.mode", self.mode.map(|m| m.as_str()));
        o.named("simulation.operator", self.operator.map(|m| m.as_str()));
        o.named("simulation.seed", self.seed.map(|v| int("seed", v)).transpose()?);
        o.named("simulation.steps", self.steps.map(|v| int("steps", v)).transpose()?);
        o.named("input.graph", self.graph.as_deref().map(absolute).transpose()?);
        o.named("input.agents", self.agents.as_deref().map(absolute).transpose()?);
        settings::load(self.config.as_deref(), &o)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => {
            let spec = commands::GenSpec {
                model: match a.model {
                    ModelArg::SmallWorld => GraphModel::SmallWorld { k: a.k, p: a.p },
                    ModelArg::ScaleFree => GraphModel::ScaleFree { m: a.m },
                },
                n: a.n,
                agents: AgentGenParams {
                    clusters: a.clusters,
                    spread: a.spread,
                    layout: match a.layout {
                        LayoutArg::Contiguous => ClusterLayout::Contiguous,
                        LayoutArg::Random => ClusterLayout::Random,
                    },
                    stubbornness: (a.stubbornness_min, a.stubbornness_max),
                },
                scale: OpinionScale::default(),
                seed: a.seed,
            };
            commands::gen(&spec, &a.out.out, a.out.force)
        }
        Command::Simulate { run, from_manifest: Some(m), out } => {
            drop(run);
            commands::simulate_from_manifest(&m, &out.out, out.force)
        }
        Command::Simulate { run, from_manifest: None, out } => commands::simulate(run.load()?, &out.out, out.force),
        Command::Compare { run_a, run_b, out } => commands::compare(&run_a, &run_b, &out.out, out.force),
        Command::VerifyBound { run, out } => commands::verify_bound(run.load()?, &out.out, out.force),
        Command::PprDump { run, out } => commands::ppr_dump(run.load()?, &out.out, out.force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
