//! Command-line workflow for GP, FITC, and deep-GP regression:
//! `train`, `predict`, `evaluate`, `benchmark`, and `gradcheck`.
//!
//! Exit codes: 0 ok, 2 config error, 3 data/schema error, 4 numeric or
//! training failure. Set `RUST_LOG` for log verbosity.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deepgp_cli::commands;
use deepgp_cli::commands::gradcheck::GradcheckArgs;
use deepgp_cli::commands::predict::PredictArgs;
use deepgp_cli::config::Family;
use deepgp_cli::error::CliResult;

#[derive(Parser)]
#[command(
    name = "deepgp",
    version,
    about = "Probabilistic regression with exact, sparse (FITC/SVGP), and deep Gaussian processes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model from a declarative TOML config; writes the model file
    /// and a training-trace CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Predict on a feature CSV with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Sample paths through hidden layers for deep models.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report latent-function variance instead of observation
        /// variance.
        #[arg(long, default_value_t = false)]
        latent: bool,
    },
    /// Compare predictions against ground truth: metrics JSON (with
    /// calibration report) plus a partitioned error table CSV.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        tables: PathBuf,
        /// Target column of the truth file.
        #[arg(long, default_value = "target")]
        target_column: String,
        /// Optional partition-label column of the truth file.
        #[arg(long)]
        label_column: Option<String>,
    },
    /// Run a benchmark spec file and write the results table CSV.
    Benchmark {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Verify a family's analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        m: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        dims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Central finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Maximum allowed relative error (defaults: 1e-4 shallow, 1e-3
        /// deep).
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FamilyArg {
    Exact,
    Fitc,
    Svgp,
    Dgp,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Family {
        match f {
            FamilyArg::Exact => Family::Exact,
            FamilyArg::Fitc => Family::Fitc,
            FamilyArg::Svgp => Family::Svgp,
            FamilyArg::Dgp => Family::Dgp,
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config } => commands::train::run(&config),
        Command::Predict {
            model,
            input,
            output,
            samples,
            seed,
            latent,
        } => commands::predict::run(&PredictArgs {
            model: &model,
            input: &input,
            output: &output,
            samples,
            seed,
            latent,
        }),
        Command::Evaluate {
            predictions,
            truth,
            metrics,
            tables,
            target_column,
            label_column,
        } => commands::evaluate::run(&commands::evaluate::EvaluateArgs {
            predictions: &predictions,
            truth: &truth,
            metrics_out: &metrics,
            tables_out: &tables,
            target_column,
            label_column,
        }),
        Command::Benchmark { spec, output } => commands::benchmark::run(&spec, &output),
        Command::Gradcheck {
            family,
            n,
            m,
            layers,
            dims,
            seed,
            step,
            tolerance,
        } => commands::gradcheck::run(&GradcheckArgs {
            family: family.into(),
            n,
            m,
            layers,
            dims,
            seed,
            step,
            tolerance,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
