use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pdgcl::harness::{self, ExperimentSpec, SweepAxis};
use pdgcl::theory::{self, MemorizationSetup, QuantileEstimator, QuantileSetup};
use pdgcl::Result;

/// Continual learning on rotated MNIST with an α-quantile risk term.
///
/// Every flag can also be set through an environment variable named
/// `PDGCL_<FLAG>` (upper case, dashes as underscores). Flags override the
/// config file.
#[derive(Parser)]
#[command(name = "pdgcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment spec and write per-run CSVs plus summary.csv.
    Run(RunArgs),
    /// Synthetic Monte-Carlo experiments.
    #[command(subcommand)]
    Theory(TheoryCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file.
    #[arg(long, env = "PDGCL_CONFIG")]
    config: Option<PathBuf>,
    /// Comma list of methods (pdg, er).
    #[arg(long, env = "PDGCL_METHOD")]
    method: Option<String>,
    /// Comma list of held-out degrees.
    #[arg(long, env = "PDGCL_HOLDOUT")]
    holdout: Option<String>,
    #[arg(long, env = "PDGCL_SEEDS")]
    seeds: Option<String>,
    #[arg(long, env = "PDGCL_ALPHA")]
    alpha: Option<String>,
    #[arg(long, env = "PDGCL_RHO")]
    rho: Option<String>,
    /// Replay memory capacity.
    #[arg(long, env = "PDGCL_MEMORY")]
    memory: Option<String>,
    /// paper (variance) or std.
    #[arg(long, env = "PDGCL_SCALE_MODE")]
    scale_mode: Option<String>,
    /// none, alpha or memory.
    #[arg(long, env = "PDGCL_SWEEP")]
    sweep: Option<String>,
    #[arg(long, env = "PDGCL_SWEEP_VALUES")]
    sweep_values: Option<String>,
    #[arg(long, env = "PDGCL_STEPS_PER_ENV")]
    steps_per_env: Option<String>,
    /// ascending or shuffled.
    #[arg(long, env = "PDGCL_ENV_ORDER")]
    env_order: Option<String>,
    #[arg(long, env = "PDGCL_JOBS")]
    jobs: Option<String>,
    #[arg(long, env = "PDGCL_DATA_DIR")]
    data_dir: Option<String>,
    #[arg(long, env = "PDGCL_OUT")]
    out: Option<String>,
    /// Also write plot series (and SVG charts) for the sweep axis.
    #[arg(long, env = "PDGCL_PLOT")]
    plot: bool,
}

impl RunArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::from_file(p)?,
            None => ExperimentSpec::default(),
        };
        let overrides = [
            ("methods", &self.method),
            ("holdouts", &self.holdout),
            ("seeds", &self.seeds),
            ("alpha", &self.alpha),
            ("rho", &self.rho),
            ("memory_capacity", &self.memory),
            ("scale_mode", &self.scale_mode),
            ("sweep", &self.sweep),
            ("sweep_values", &self.sweep_values),
            ("steps_per_env", &self.steps_per_env),
            ("env_order", &self.env_order),
            ("jobs", &self.jobs),
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                spec.set(key, v)?;
            }
        }
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Probability that a perturbed global solution is ε-optimal on all m
    /// environments.
    Memorization(MemorizationArgs),
    /// Error of the α-quantile estimated from m sampled risks.
    Quantile(QuantileArgs),
}

#[derive(Args)]
struct MemorizationArgs {
    #[arg(long, value_delimiter = ',', default_values_t = theory::DEFAULT_ENV_COUNTS)]
    ms: Vec<usize>,
    #[arg(long, default_value_t = MemorizationSetup::default().epsilon)]
    epsilon: f64,
    #[arg(long, default_value_t = MemorizationSetup::default().noise_scale)]
    noise: f64,
    #[arg(long, default_value_t = MemorizationSetup::default().n_trials)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = MemorizationSetup::default().dim)]
    dim: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QuantileArgs {
    #[arg(long, value_delimiter = ',', default_values_t = theory::DEFAULT_RISK_COUNTS)]
    ms: Vec<usize>,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// empirical or gaussian.
    #[arg(long, default_value = "empirical")]
    estimator: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(csv: &str, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(p) => harness::write_atomic(p, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let spec = args.spec()?;
            let table = harness::run(&spec)?;
            print!("{}", table.summary_csv());
            if args.plot && spec.sweep != SweepAxis::None {
                let dir = spec.out_dir.join("plots");
                for p in harness::emit_plot_data(&table, spec.sweep, &dir, true)? {
                    eprintln!("wrote {}", p.display());
                }
            }
            Ok(())
        }
        Command::Theory(TheoryCommand::Memorization(a)) => {
            let setup = MemorizationSetup {
                epsilon: a.epsilon,
                n_trials: a.trials,
                noise_scale: a.noise,
                seed: a.seed,
                dim: a.dim,
                ..MemorizationSetup::default()
            };
            emit(&theory::curve_csv(&theory::memorization_curve(&a.ms, &setup)?), &a.out)
        }
        Command::Theory(TheoryCommand::Quantile(a)) => {
            let estimator: QuantileEstimator = a.estimator.parse()?;
            let setup = QuantileSetup {
                alpha: a.alpha,
                mu: a.mu,
                sigma: a.sigma,
                n_trials: a.trials,
                seed: a.seed,
                estimator,
            };
            emit(&theory::curve_csv(&theory::quantile_error_curve(&a.ms, &setup)?), &a.out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
