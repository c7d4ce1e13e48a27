use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nbafl_cli::commands::{self, BoundAxis, BoundForm, BoundOptions, SweepVariable};
use nbafl_cli::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "nbafl", version, about = "Differentially private federated learning simulator")]
struct Cli {
    /// Run configuration (flat key = value file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads used inside each round.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    T,
    K,
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    General,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variable {
    Epsilon,
    NClients,
    KClients,
    Rounds,
}

#[derive(Subcommand)]
enum Command {
    /// Print sensitivities and noise scales.
    Calibrate,
    /// Run one simulation and write run_<seed>.csv.
    Run,
    /// Evaluate a convergence bound over T or K and write bound_T.csv / bound_K.csv.
    Bound {
        #[arg(long, value_enum, default_value = "t")]
        over: Axis,
        /// Largest T on the grid (defaults to the configured rounds).
        #[arg(long)]
        grid_max: Option<u32>,
        #[arg(long, value_enum, default_value = "general")]
        form: Form,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Regularity constants; all five or none (then they are estimated).
        #[arg(long, requires_all = ["beta", "pl", "dissimilarity", "theta"])]
        rho: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        pl: Option<f64>,
        #[arg(long)]
        dissimilarity: Option<f64>,
        #[arg(long)]
        theta: Option<f64>,
        /// Dimension of the noise vector in the noise-norm moments (default N).
        #[arg(long)]
        noise_dim: Option<usize>,
    },
    /// Run seeds x values simulations and write long-format and summary CSVs.
    Sweep {
        #[arg(long, value_enum)]
        variable: Variable,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Monte-Carlo audit of the calibrated scalar Gaussian mechanism.
    Audit {
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, hide = true, default_value_t = 1.0)]
        sigma_scale: f64,
    },
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("this command needs --config".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let mut stdout = io::stdout().lock();
    if cli.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    match &cli.command {
        Command::Calibrate => commands::calibrate(&load_config(cli)?, &mut stdout),
        Command::Run => commands::run(&load_config(cli)?, cli.jobs, &mut stdout).map(|_| ()),
        Command::Bound {
            over,
            grid_max,
            form,
            epsilon,
            rho,
            beta,
            pl,
            dissimilarity,
            theta,
            noise_dim,
        } => {
            let constants = match (rho, beta, pl, dissimilarity, theta) {
                (Some(a), Some(b), Some(c), Some(d), Some(e)) => Some([*a, *b, *c, *d, *e]),
                _ => None,
            };
            let opts = BoundOptions {
                axis: match over {
                    Axis::T => BoundAxis::Rounds,
                    Axis::K => BoundAxis::Clients,
                },
                grid_max: *grid_max,
                form: match form {
                    Form::General => BoundForm::General,
                    Form::Paper => BoundForm::Paper,
                },
                epsilon: *epsilon,
                constants,
                noise_dim: *noise_dim,
            };
            commands::bound(&load_config(cli)?, &opts, &mut stdout).map(|_| ())
        }
        Command::Sweep { variable, values, seeds } => {
            let variable = match variable {
                Variable::Epsilon => SweepVariable::Epsilon,
                Variable::NClients => SweepVariable::NClients,
                Variable::KClients => SweepVariable::KClients,
                Variable::Rounds => SweepVariable::Rounds,
            };
            commands::sweep(&load_config(cli)?, variable, values, *seeds, cli.jobs, &mut stdout).map(|_| ())
        }
        Command::Audit {
            epsilon,
            delta,
            samples,
            sigma_scale,
        } => commands::audit(*epsilon, *delta, *samples, cli.seed.unwrap_or(0), *sigma_scale, &mut stdout),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
