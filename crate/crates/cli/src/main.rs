use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gmm_mcl_cli::commands::{self, bench, eval, fit_map, localize, simulate, sweep};
use gmm_mcl_cli::{CliError, EXIT_USAGE};

/// Monte-Carlo localization of a depth camera in a Gaussian-mixture map.
#[derive(Parser)]
#[command(name = "gmm-mcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    config: PathBuf,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a mixture map to a point cloud (.xyz or ASCII .ply).
    FitMap {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        components: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Run the filter over a recorded or simulated sequence.
    Localize(ConfigArgs),
    /// Render a synthetic sequence, its ground truth and a surface cloud.
    Simulate(ConfigArgs),
    /// RMSE of an estimated trajectory against ground truth (TUM format).
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Per-step errors as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// KL-divergence sensitivity of reduced filters against a reference.
    Sweep(ConfigArgs),
    /// Per-stage timing of the filter.
    Bench(ConfigArgs),
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::FitMap { cloud, components, seed, out, max_iters, tol } => {
            fit_map::execute(fit_map::plan(fit_map::Args { cloud, components, seed, out, max_iters, tol })?)
        }
        Command::Eval { est, truth, out } => eval::execute(eval::plan(eval::Args { est, truth, out })?),
        Command::Localize(a) => localize::execute(localize::plan(&commands::load_config(&a.config, &a.set)?)?),
        Command::Simulate(a) => simulate::execute(simulate::plan(&commands::load_config(&a.config, &a.set)?)?),
        Command::Sweep(a) => sweep::execute(sweep::plan(&commands::load_config(&a.config, &a.set)?)?),
        Command::Bench(a) => bench::execute(bench::plan(&commands::load_config(&a.config, &a.set)?)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
