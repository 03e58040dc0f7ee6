use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ripforge::experiments::{self, ExperimentSpec, RecipeKind};

#[derive(Parser)]
#[command(name = "ripforge", version, about = "Forge and probe matrix-sensing instances with spurious local minima")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecipeArg {
    Good,
    Bad,
}

#[derive(Subcommand)]
enum Command {
    /// Check the two-dimensional example instance and its spurious point.
    VerifyExample1 {
        #[arg(long, default_value = "out/example1")]
        out: PathBuf,
    },
    /// Forge an instance whose sampled point is a strict spurious local minimum.
    Forge {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        r: usize,
        #[arg(long, value_enum)]
        recipe: RecipeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Final-error histogram of SGD from Gaussian starts.
    SgdHist {
        /// Instance or forge-result JSON, or `example1`.
        #[arg(long)]
        instance: String,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// SGD started between a fixed point and Gaussian noise.
    GammaSweep {
        #[arg(long)]
        instance: String,
        /// JSON list of rows; defaults to the point stored in a forge result.
        #[arg(long)]
        xloc: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bound the smallest RIP constant admitting a spurious minimum.
    DeltaSearch {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        r: usize,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop after this many seconds even if samples remain.
        #[arg(long)]
        time_budget: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl From<Command> for ExperimentSpec {
    fn from(c: Command) -> Self {
        match c {
            Command::VerifyExample1 { out } => ExperimentSpec::VerifyExample1 { out },
            Command::Forge { n, r, recipe, seed, out } => ExperimentSpec::Forge {
                n,
                r,
                recipe: match recipe {
                    RecipeArg::Good => RecipeKind::Good,
                    RecipeArg::Bad => RecipeKind::Bad,
                },
                seed,
                out,
            },
            Command::SgdHist { instance, trials, steps, lr, momentum, seed, out } => {
                ExperimentSpec::SgdHistogram { instance, trials, steps, lr, momentum, seed, out }
            }
            Command::GammaSweep { instance, xloc, gammas, trials, steps, lr, momentum, seed, out } => {
                ExperimentSpec::GammaSweep { instance, xloc, gammas, trials, steps, lr, momentum, seed, out }
            }
            Command::DeltaSearch { n, r, samples, seed, time_budget, out } => ExperimentSpec::DeltaSearch {
                n,
                r,
                samples,
                seed,
                time_budget_secs: time_budget,
                out,
            },
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let spec: ExperimentSpec = Cli::parse().command.into();
    let report = experiments::run(&spec);
    for a in &report.assertions {
        println!("{} {}: {}", if a.passed { "ok  " } else { "FAIL" }, a.name, a.detail);
    }
    if let Some(e) = &report.error {
        eprintln!("error ({}): {}", e.category, e.message);
    } else {
        println!("summary written to {}", spec.out().join("summary.json").display());
    }
    ExitCode::from(report.exit_code as u8)
}
