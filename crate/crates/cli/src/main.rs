mod cmd;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "latjoint",
    version,
    about = "Joint latent-process models for longitudinal markers and clinical endpoints"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "LATJOINT_THREADS")]
    threads: Option<usize>,

    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to data files.
    Fit(FitArgs),
    /// Generate a dataset from a simulation design.
    Simulate(SimulateArgs),
    /// Generate and fit many datasets and summarize bias and coverage.
    Replicate(ReplicateArgs),
    /// Predicted degradation trajectory of a covariate profile.
    Predict(PredictArgs),
    /// Evaluate a multivariate normal CDF described in a TOML file.
    Mvncdf(MvncdfArgs),
}

#[derive(Args, Debug)]
struct OptimizerArgs {
    /// Iteration limit of the optimizer.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Tolerance on the relative distance to the maximum.
    #[arg(long)]
    tol_rdm: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Model specification (TOML).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    markers: PathBuf,
    #[arg(long)]
    diag: Option<PathBuf>,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Starting values: staged marker-only fits or neutral values.
    #[arg(long, value_enum, default_value_t = cmd::Init::Staged)]
    init: cmd::Init,
    #[command(flatten)]
    opt: OptimizerArgs,
}

#[derive(Args, Debug)]
struct DesignArgs {
    /// Built-in design name (I.1.a, I.1.b, I.2.a, I.2.b, I.3, I.4, II.1, truncation).
    #[arg(long, conflicts_with = "design", required_unless_present = "design")]
    scenario: Option<String>,
    /// Simulation design file (TOML).
    #[arg(long)]
    design: Option<PathBuf>,
    /// Override the number of subjects.
    #[arg(long)]
    n_subjects: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplicateArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, default_value_t = 10)]
    replicates: usize,
    /// Model to fit when it differs from the generating one (TOML).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opt: OptimizerArgs,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Fitted-model file written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Covariate values, e.g. `--profile EL=1`.
    #[arg(long, value_delimiter = ',')]
    profile: Vec<String>,
    /// Model times as `start:stop:step` or a comma list.
    #[arg(long)]
    times: String,
    #[arg(long, default_value_t = 2000)]
    draws: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MvncdfArgs {
    /// TOML file with `upper`, `cov` and optionally `mean`.
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Stable exit codes.
const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_INPUT);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_NUMERICAL);
        }
    }
    let result = match cli.command {
        Command::Fit(a) => cmd::fit(a),
        Command::Simulate(a) => cmd::simulate(a),
        Command::Replicate(a) => cmd::replicate(a),
        Command::Predict(a) => cmd::predict(a),
        Command::Mvncdf(a) => cmd::mvncdf(a),
    };
    match result {
        Ok(cmd::Outcome::Done) => ExitCode::SUCCESS,
        Ok(cmd::Outcome::NotConverged) => ExitCode::from(EXIT_NOT_CONVERGED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() {
                EXIT_INPUT
            } else {
                EXIT_NUMERICAL
            })
        }
    }
}
