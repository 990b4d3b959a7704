mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdvi::error::{ConfigError, SdviError};

use crate::config::{Algorithm, Overrides, RunConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_INFERENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "sdvi", version, about = "Support decomposition variational inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find straight-line programs by simulating from the prior.
    Discover(RunArgs),
    /// Fit SDVI, online SDVI, or the BBVI baseline.
    Fit(RunArgs),
    /// Score a finished run against the model's oracle and held-out data.
    Eval {
        /// Directory written by `sdvi fit`.
        #[arg(long)]
        run: PathBuf,
        /// Posterior draws for LPPD; defaults to the run's setting.
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fig1, normal-intervals, gmm or gp.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long, value_enum)]
    algorithm: Option<Algorithm>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    discovery_sims: Option<usize>,
    /// Iterations per successive-halving run.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    min_candidates: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_samples: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// BBVI iterations.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    max_runs: Option<usize>,
    #[arg(long)]
    max_wall_secs: Option<f64>,
    #[arg(long)]
    posterior_samples: Option<usize>,
}

impl RunArgs {
    fn resolve(self) -> anyhow::Result<RunConfig> {
        let flags = Overrides {
            model: self.model,
            data_seed: self.data_seed,
            algorithm: self.algorithm,
            seed: self.seed,
            output: self.output,
            discovery_sims: self.discovery_sims,
            budget: self.budget,
            min_candidates: self.min_candidates,
            alpha: self.alpha,
            particles: self.particles,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            weight_samples: self.weight_samples,
            workers: self.workers,
            iterations: self.iterations,
            max_runs: self.max_runs,
            max_wall_secs: self.max_wall_secs,
            posterior_samples: self.posterior_samples,
        };
        RunConfig::resolve(self.config.as_deref(), &flags)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Discover(args) => commands::cmd_discover(&args.resolve()?),
        Command::Fit(args) => commands::cmd_fit(&args.resolve()?),
        Command::Eval { run, samples } => {
            for m in commands::cmd_eval(&run, samples)? {
                println!("{}: {}", m.name, m.value.as_deref().unwrap_or("unavailable"));
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<SdviError>() {
        Some(SdviError::Config(_)) => EXIT_CONFIG,
        Some(_) => EXIT_INFERENCE,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
