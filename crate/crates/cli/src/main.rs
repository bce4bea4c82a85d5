//! `tmc`: batch front end for time-marginalized coalescent clustering.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tmc::Error;

#[derive(Parser, Debug)]
#[command(name = "tmc", version, about = "Hierarchical clustering with the time-marginalized coalescent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a tree from the prior, optionally with random-walk leaf locations.
    #[command(args_override_self = true)]
    SamplePrior(SamplePriorArgs),
    /// Sample trees for observed leaves with SPR Metropolis-Hastings.
    #[command(args_override_self = true)]
    Cluster(ClusterArgs),
    /// Evaluate the 2-D posterior predictive density on a grid.
    #[command(args_override_self = true)]
    Density(DensityArgs),
    /// Draw new leaves from the posterior predictive.
    #[command(args_override_self = true)]
    SamplePredictive(SamplePredictiveArgs),
    /// Fit inducing points to a dataset.
    #[command(args_override_self = true)]
    LoracsFit(LoracsFitArgs),
    /// Attachment posteriors of data on a fitted inducing tree.
    #[command(args_override_self = true)]
    Attach(AttachArgs),
    /// Convert a tree to Newick, JSON or DOT.
    #[command(args_override_self = true)]
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// Key-value configuration file; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for parallel library calls, 0 for one per core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Args, Debug)]
pub struct PriorArgs {
    /// First Beta shape of the branching-time prior.
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    /// Second Beta shape of the branching-time prior.
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
}

#[derive(Args, Debug)]
pub struct SamplePriorArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[arg(long)]
    pub n_leaves: usize,
    /// Also draw leaf locations of this dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Leaf evidence, CSV or binary matrix.
    #[arg(long)]
    pub evidence: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n_steps: u64,
    #[arg(long, default_value_t = 10)]
    pub thin: u64,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GridFormat {
    Csv,
    Binary,
}

#[derive(Args, Debug)]
pub struct DensityArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Tree file: JSON, or one Newick tree per line (densities are pooled).
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub evidence: PathBuf,
    #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
    pub x_min: f64,
    #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
    pub x_max: f64,
    #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
    pub y_min: f64,
    #[arg(long, default_value_t = 4.0, allow_hyphen_values = true)]
    pub y_max: f64,
    #[arg(long, default_value_t = 101)]
    pub nx: usize,
    #[arg(long, default_value_t = 101)]
    pub ny: usize,
    /// Gauss-Legendre order of the per-branch time integral.
    #[arg(long, default_value_t = tmc::predictive::DEFAULT_TIME_QUAD)]
    pub quad_order: usize,
    #[arg(long, value_enum, default_value_t = GridFormat::Csv)]
    pub format: GridFormat,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SamplePredictiveArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[arg(long)]
    pub tree: PathBuf,
    #[arg(long)]
    pub evidence: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n_samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Init {
    Kmeans,
    Random,
}

#[derive(Args, Debug)]
pub struct LoracsFitArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Data means, with optional variance columns.
    #[arg(long)]
    pub data: PathBuf,
    /// Variance for data rows that do not carry their own.
    #[arg(long)]
    pub datum_variance: Option<f64>,
    /// Number of inducing points.
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[arg(long, default_value_t = 1)]
    pub n_trees: usize,
    #[arg(long, default_value_t = 200)]
    pub n_steps: u64,
    /// Adam step size.
    #[arg(long, default_value_t = 0.05)]
    pub step_size: f64,
    /// SPR steps per tree chain between point updates.
    #[arg(long, default_value_t = 100)]
    pub n_mcmc: u64,
    /// Minibatch size; the full dataset when absent.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = Init::Kmeans)]
    pub init: Init,
    /// Standard deviation of random initial points.
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AttachArgs {
    #[command(flatten)]
    pub common: Common,
    /// Inducing checkpoint from `loracs-fit`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub datum_variance: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TreeFormat {
    Newick,
    Json,
    Dot,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub tree: PathBuf,
    /// Which tree of a multi-tree Newick file.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_enum)]
    pub format: TreeFormat,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 1,
        Error::Parse { .. } | Error::Format { .. } | Error::Json(_) => 3,
        Error::Numerical(_) => 4,
        _ => 2,
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "level={} module={} msg=\"{}\"", record.level(), record.target(), record.args()))
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let args = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            log::error!("{e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
