//! Command-line front end: synthetic data generation, streaming fits,
//! baseline fits, prediction, PKL evaluation, lawnmower simulation and
//! per-iteration benchmarks. Every command loads and validates its config
//! before touching any data.

mod commands;
mod common;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use sgdrf_core::{Error, ErrorKind};

pub use commands::bench::{random_records, BenchRow};
pub use common::{checkpoint_file_name, list_checkpoints, parse_checkpoint_name};

#[derive(Debug, Parser)]
#[command(name = "sgdrf", version, about = "Streaming Gaussian-Dirichlet random fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Sgdrf,
    Vgp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PredictChoice {
    /// Evaluate at variational means.
    PlugIn,
    /// Average over posterior samples.
    MonteCarlo,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset from the generative model, with its ground truth.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Dataset CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// True observation distributions at every sampled location.
        #[arg(long)]
        truth_out: PathBuf,
        /// True community weights; defaults to `<truth-out stem>_theta.csv`.
        #[arg(long)]
        theta_out: Option<PathBuf>,
        /// True Φ; defaults to `<truth-out stem>_phi.csv`.
        #[arg(long)]
        phi_out: Option<PathBuf>,
        /// `grid` for a regular grid over the world, otherwise a CSV whose leading columns are x1[,x2].
        #[arg(long, default_value = "grid")]
        locations: String,
        /// Points per dimension for `--locations grid`, comma separated; defaults to the inducing counts.
        #[arg(long, value_delimiter = ',')]
        grid_counts: Option<Vec<usize>>,
        #[arg(long, default_value_t = 100)]
        count_per_location: u64,
        /// Defaults to `inference.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Replay a dataset as a stream through the online trainer.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory receiving `checkpoint-t<t>.sgdrf` files.
        #[arg(long)]
        checkpoint_out: PathBuf,
        /// Observations between checkpoints; defaults to `evaluation.checkpoint_stride` (10).
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Iterations between `t=… iter=… elbo=…` lines on stderr; 0 disables.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
        /// Defaults to `inference.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the per-category sparse GP regression baseline offline.
    VgpFit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use only the first `t` records; defaults to all of them.
        #[arg(long)]
        upto: Option<usize>,
    },
    /// Predict observation distributions from a checkpoint.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV whose leading columns are x1[,x2]. Without it, predictions cover a grid (see `--grid-counts`).
        #[arg(long, conflicts_with = "grid_counts")]
        locations: Option<PathBuf>,
        /// Grid points per dimension, comma separated; defaults to the inducing counts.
        #[arg(long, value_delimiter = ',')]
        grid_counts: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        /// Community weights per location (S-GDRF checkpoints only).
        #[arg(long)]
        theta_out: Option<PathBuf>,
        /// Posterior-mean Φ (S-GDRF checkpoints only).
        #[arg(long)]
        phi_out: Option<PathBuf>,
        /// Most likely community per grid cell, CSV plus PGM; needs `--grid-counts`.
        #[arg(long, requires = "grid_counts")]
        map_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "plug-in")]
        mode: PredictChoice,
        /// Posterior samples for `--mode monte-carlo`.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Defaults to `inference.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predictive KL of every checkpoint against the records that follow it.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// S-GDRF checkpoints from `fit`; for `--model vgp` they only pick the refit points.
        #[arg(long)]
        checkpoints_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sgdrf")]
        model: ModelChoice,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "plug-in")]
        mode: PredictChoice,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Stream grid observations along a lawnmower sweep and map the communities.
    SimulateLawnmower {
        #[arg(long)]
        config: PathBuf,
        /// Dataset with exactly one record per grid cell.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out_map: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Grid points per dimension; inferred from the distinct coordinates when omitted.
        #[arg(long, value_delimiter = ',')]
        grid_counts: Option<Vec<usize>>,
        #[arg(long, default_value_t = 100)]
        log_every: u64,
        /// Defaults to `inference.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mean wall time per training iteration at several buffer sizes.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Buffer sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
        sizes: Vec<usize>,
        /// Minibatch sizes to sweep, comma separated; defaults to `inference.n_s`.
        #[arg(long, value_delimiter = ',')]
        n_s: Option<Vec<usize>>,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// Total count of each synthetic buffered record.
        #[arg(long, default_value_t = 100)]
        count_per_location: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process exit status for an error: 1 validation, 2 numerical, 3 I/O.
pub fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 1,
        ErrorKind::Numerical => 2,
        ErrorKind::Io => 3,
    }
}

pub fn run(cli: &Cli) -> sgdrf_core::Result<()> {
    use commands::*;
    match &cli.command {
        Command::Generate {
            config,
            out,
            truth_out,
            theta_out,
            phi_out,
            locations,
            grid_counts,
            count_per_location,
            seed,
        } => generate::run(&generate::Args {
            config,
            out,
            truth_out,
            theta_out: theta_out.as_deref(),
            phi_out: phi_out.as_deref(),
            locations,
            grid_counts: grid_counts.as_deref(),
            count_per_location: *count_per_location,
            seed: *seed,
        }),
        Command::Fit {
            config,
            data,
            checkpoint_out,
            checkpoint_every,
            log_every,
            seed,
        } => fit::run(config, data, checkpoint_out, *checkpoint_every, *log_every, *seed),
        Command::VgpFit { config, data, out, upto } => fit::run_vgp(config, data, out, *upto),
        Command::Predict {
            config,
            checkpoint,
            locations,
            grid_counts,
            out,
            theta_out,
            phi_out,
            map_out,
            mode,
            samples,
            seed,
        } => predict::run(&predict::Args {
            config,
            checkpoint,
            locations: locations.as_deref(),
            grid_counts: grid_counts.as_deref(),
            out,
            theta_out: theta_out.as_deref(),
            phi_out: phi_out.as_deref(),
            map_out: map_out.as_deref(),
            mode: *mode,
            samples: *samples,
            seed: *seed,
        }),
        Command::Evaluate {
            config,
            data,
            checkpoints_dir,
            model,
            out,
            mode,
            samples,
        } => evaluate::run(config, data, checkpoints_dir.as_deref(), *model, out, *mode, *samples),
        Command::SimulateLawnmower {
            config,
            features,
            out_map,
            out_checkpoint,
            grid_counts,
            log_every,
            seed,
        } => simulate::run(
            config,
            features,
            out_map,
            out_checkpoint,
            grid_counts.as_deref(),
            *log_every,
            *seed,
        ),
        Command::Bench {
            config,
            sizes,
            n_s,
            iterations,
            warmup,
            count_per_location,
            out,
        } => bench::run(&bench::Args {
            config,
            sizes,
            n_s: n_s.as_deref(),
            iterations: *iterations,
            warmup: *warmup,
            count_per_location: *count_per_location,
            out,
        })
        .map(|_| ()),
    }
}
