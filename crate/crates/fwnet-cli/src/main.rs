use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand};

use fwnet_cli::commands::{dispatch, Ctx};
use fwnet_cli::config::ExperimentConfig;
use fwnet_cli::{CliError, Result};

/// Finite-width Bayesian network theory and sampling experiments.
#[derive(Parser)]
#[command(name = "fwnet", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Output directory (falls back to FWNET_OUT_DIR, then the current dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the dataset seed from the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for chain ensembles (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the training (and held-out) datasets
    GenData { config: PathBuf },
    /// Compute or refresh the infinite-width kernel cache
    Kernel { config: PathBuf },
    /// Solve the order-parameter equations over the load list
    Solve { config: PathBuf },
    /// Predictor statistics on the held-out set
    Predict { config: PathBuf },
    /// One Monte Carlo ensemble compared against the theory
    Simulate { config: PathBuf },
    /// Size sweep at fixed load with fitted finite-width exponents
    Scaling { config: PathBuf },
    /// Readout-width sweep of the theory with Monte Carlo spot checks
    ChannelSweep { config: PathBuf },
    /// Fast invariant suite over the analytic components
    Verify { config: PathBuf },
}

impl Cmd {
    fn name_and_config(&self) -> (&'static str, &PathBuf) {
        match self {
            Cmd::GenData { config } => ("gen-data", config),
            Cmd::Kernel { config } => ("kernel", config),
            Cmd::Solve { config } => ("solve", config),
            Cmd::Predict { config } => ("predict", config),
            Cmd::Simulate { config } => ("simulate", config),
            Cmd::Scaling { config } => ("scaling", config),
            Cmd::ChannelSweep { config } => ("channel-sweep", config),
            Cmd::Verify { config } => ("verify", config),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot size the thread pool: {e}")))?;
    }
    let out_dir = cli
        .out
        .or_else(|| std::env::var_os("FWNET_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let (name, config_path) = cli.cmd.name_and_config();
    let mut cfg = ExperimentConfig::from_path(config_path)?;
    cfg.override_seed(cli.seed);
    let ctx = Ctx::new(cfg, out_dir)?;
    log::info!("{name}: config hash {}", &ctx.hash[..16]);
    dispatch(name, &ctx)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        process::exit(e.exit_code().into());
    }
}
