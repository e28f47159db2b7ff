mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radnet::model::Variant;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "radnet",
    version,
    about = "Traffic forecasting and incident detection"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Forecast horizon in intervals; repeat or comma-separate for several.
    #[arg(long, global = true, value_delimiter = ',')]
    horizon: Option<Vec<usize>>,
    /// full, no_skip, no_st or no_ts.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory holding meta.json, features.bin and edges.csv.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with injected incidents.
    Synth(SynthArgs),
    /// Summarise a dataset.
    Stats,
    /// Train one model per horizon and write checkpoints and loss curves.
    Train,
    /// Forecast the test part with trained checkpoints.
    Forecast,
    /// Label true and forecast residual streams.
    Detect,
    /// Score predicted labels against the true ones.
    Evaluate,
    /// Compare the full model with its ablated variants.
    Ablate,
    /// Per-link series of baseline, truth, forecast, threshold and label.
    Report,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    /// Interval length in seconds.
    #[arg(long)]
    delta: Option<u64>,
    /// Number of random incidents.
    #[arg(long)]
    incidents: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let flags = Overrides {
        data: cli.common.data,
        out: cli.common.out,
        horizons: cli.common.horizon,
        variant: cli.common.variant,
        seed: cli.common.seed,
    };
    let mut cfg = RunConfig::resolve(cli.common.config.as_deref(), &flags)?;
    if let Command::Synth(a) = &cli.command {
        let s = &mut cfg.synth;
        s.n_nodes = a.nodes.unwrap_or(s.n_nodes);
        s.days = a.days.unwrap_or(s.days);
        s.delta_seconds = a.delta.unwrap_or(s.delta_seconds);
        s.incidents.count = a.incidents.unwrap_or(s.incidents.count);
        s.n_features = a.features.unwrap_or(s.n_features);
    }
    if cli.dump_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    match cli.command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Stats => commands::stats(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Forecast => commands::forecast(&cfg),
        Command::Detect => commands::detect(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Ablate => commands::ablate(&cfg),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RADNET_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
