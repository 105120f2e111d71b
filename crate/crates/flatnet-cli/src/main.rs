//! `flatnet` — experiment harness around the FlatNet library.
//!
//! Subcommands: `gen`, `train`, `eval`, `flow`, `dimsweep`. Every command
//! takes `--seed`, `--out`, and `--config`, writes only inside its output
//! directory, and drops a `config.resolved` file that pins every parameter
//! the run used.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

pub(crate) const EXIT_USAGE: u8 = 1;
pub(crate) const EXIT_DATA: u8 = 2;
pub(crate) const EXIT_NUMERICAL: u8 = 3;

/// A command failure with its process exit code.
pub(crate) struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { code: EXIT_DATA, message: message.into() }
    }
}

impl From<flatnet_core::Error> for Failure {
    fn from(e: flatnet_core::Error) -> Self {
        use flatnet_core::Error as E;
        let code = match &e {
            E::InvalidParam { .. } => EXIT_USAGE,
            E::Io(_)
            | E::Json(_)
            | E::CsvFormat { .. }
            | E::VersionMismatch { .. }
            | E::Schema { .. }
            | E::MissingHead
            | E::NoLayers => EXIT_DATA,
            _ => EXIT_NUMERICAL,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: EXIT_DATA, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "flatnet", version, about = "Construct and evaluate manifold-flattening autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// RNG seed; every generator and training run derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (created if missing); all files land here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Flat key=value file supplying defaults for omitted flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as CSV.
    Gen {
        #[command(subcommand)]
        kind: GenKind,
    },
    /// Construct a FlatNet on a CSV dataset and fit its PCA head.
    Train {
        /// Input dataset CSV.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        hyper: HyperOpts,
    },
    /// Evaluate a trained model on a dataset.
    Eval {
        /// Trained model JSON.
        #[arg(long)]
        model: PathBuf,
        /// Input dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Emit the pairwise distance-ratio matrix (requires intrinsic coordinates).
        #[arg(long)]
        edm: bool,
        /// Require decoded interpolants in the scatter plot (needs a PCA head).
        #[arg(long)]
        interpolate: bool,
        /// Neighbor count of the local-likelihood dimension baseline.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run the normalized convexification flow and record snapshots.
    Flow {
        /// Input dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Number of Euler steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Step size in [0, 1].
        #[arg(long)]
        h: Option<f64>,
        /// Gaussian weight scale of the local averages.
        #[arg(long)]
        lambda: Option<f64>,
        /// Tangent rank of the per-point projection.
        #[arg(long)]
        d: Option<usize>,
        /// Snapshot cadence in steps.
        #[arg(long)]
        record_every: Option<usize>,
    },
    /// Sweep intrinsic dimensions: generate, train, and compare estimators.
    Dimsweep {
        /// Comma-separated list of true intrinsic dimensions.
        #[arg(long, value_delimiter = ',')]
        d_list: Vec<usize>,
        /// Ambient dimension of the generated manifolds.
        #[arg(long = "D")]
        ambient: Option<usize>,
        /// Samples per manifold.
        #[arg(long)]
        n: Option<usize>,
        /// Independent repetitions per dimension.
        #[arg(long)]
        trials: Option<usize>,
        #[command(flatten)]
        hyper: HyperOpts,
    },
}

#[derive(Subcommand)]
enum GenKind {
    /// Random smooth d-manifold embedded in R^D via Gaussian-process rows.
    Gp {
        /// Intrinsic dimension.
        #[arg(long)]
        d: Option<usize>,
        /// Ambient dimension.
        #[arg(long = "D")]
        ambient: Option<usize>,
        /// Sample count.
        #[arg(long)]
        n: Option<usize>,
        /// Per-coordinate scales, comma separated (defaults to all ones).
        #[arg(long, value_delimiter = ',')]
        scale: Vec<f64>,
    },
    /// Noisy sine-wave graph in the plane.
    Sine {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        frequency: Option<f64>,
        /// Gaussian observation noise on the height.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Circle arc with radial noise.
    Circle {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        radius: Option<f64>,
        /// Fraction of the full circle covered by samples, in (0, 1].
        #[arg(long)]
        arc_fraction: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Swiss roll, optionally augmented with the unrolling feature.
    Swissroll {
        #[arg(long)]
        n: Option<usize>,
        /// Append the fourth coordinate x1^2 + x3^2.
        #[arg(long)]
        augmented: bool,
    },
}

/// Hyperparameter overrides shared by `train` and `dimsweep`. Omitted values
/// fall back to the config file, then to data-relative defaults.
#[derive(Args)]
struct HyperOpts {
    #[arg(long)]
    eps_dim: Option<f64>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    eps_pou: Option<f64>,
    #[arg(long)]
    lambda_max: Option<f64>,
    #[arg(long)]
    lambda_min: Option<f64>,
    #[arg(long)]
    alpha_max: Option<f64>,
    /// Hard cap on the number of accepted layers.
    #[arg(long)]
    l_max: Option<usize>,
    /// Consecutive no-progress iterations tolerated before halting.
    #[arg(long)]
    patience: Option<usize>,
    /// Relative flatness-proxy improvement that counts as progress.
    #[arg(long)]
    flat_tol: Option<f64>,
    #[arg(long)]
    stiefel_max_iters: Option<usize>,
    #[arg(long)]
    stiefel_step0: Option<f64>,
    #[arg(long)]
    stiefel_grad_tol: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
