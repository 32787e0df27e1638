use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kronflow_experiments::config::{ExperimentConfig, ExperimentKind};
use kronflow_experiments::runner::run;

#[derive(Parser)]
#[command(name = "kronflow", version, about = "Kronecker-flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit Gaussian families to random dense targets.
    SimulateKl(RunArgs),
    /// Train stochastic networks.
    TrainSnn(RunArgs),
    /// Train and certify PAC-Bayes bounds.
    Certify(RunArgs),
    /// Thompson-sampling bandit episodes.
    Bandit(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(kind: ExperimentKind, args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(kind),
    };
    if cfg.experiment.kind != kind {
        anyhow::bail!(
            "config describes a {} experiment, not {}",
            cfg.experiment.kind.tag(),
            kind.tag()
        );
    }
    if let Some(seed) = args.seed {
        cfg.experiment.seeds = vec![seed];
    }
    if let Some(out) = args.out {
        cfg.experiment.out = out;
    }
    let out = cfg.experiment.out.clone();
    for path in run(&cfg, &out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::SimulateKl(a) => (ExperimentKind::SimulateKl, a),
        Command::TrainSnn(a) => (ExperimentKind::TrainSnn, a),
        Command::Certify(a) => (ExperimentKind::Certify, a),
        Command::Bandit(a) => (ExperimentKind::Bandit, a),
    };
    match execute(kind, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
