//! Command-line front end: every pipeline is a pure function of a run
//! configuration, its input files and a root seed.

mod commands;
pub mod config;
pub mod dataset;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

/// Exit status for input that failed validation before any computation.
pub const EXIT_VALIDATION: i32 = 1;
/// Exit status for failures while computing or writing results.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

pub(crate) fn invalid(msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(msg.to_string())
}

pub(crate) fn failed(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "biasprobe", version, about = "Mine attribute relationships from a classifier's inference patterns and diagnose representation bias")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic attribute dataset.
    Synth(SynthArgs),
    /// Train the standard network on a dataset.
    Train(TrainArgs),
    /// Diagnose a trained network against annotated relationships.
    Diagnose(DiagnoseArgs),
    /// Sweep the bias level of one attribute pair and record its KL.
    Experiment2(Experiment2Args),
    /// Compare failure modes from the KL diagnosis with the entropy baseline.
    Experiment3(Experiment3Args),
    /// Export the contribution heat map of one attribute on one image.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Existing output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Lays out this many disjoint-region attributes, replacing the configured layout.
    #[arg(long)]
    pub attributes: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub init_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth` (or laid out the same way).
    #[arg(long)]
    pub data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Layer whose output the model file names as its probe.
    #[arg(long)]
    pub probe_layer: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub labels: LabelFlags,
}

#[derive(Debug, Args, Default)]
pub struct LabelFlags {
    /// Attribute whose annotation sign is flipped on load (repeatable).
    #[arg(long = "flip", value_name = "ATTRIBUTE")]
    pub flips: Vec<String>,
    /// Threshold for binarizing continuous annotations.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct DiagnosisFlags {
    /// Probe layer index, overriding the model's own.
    #[arg(long)]
    pub probe_layer: Option<usize>,
    /// Absolute pattern-selection penalty.
    #[arg(long, conflicts_with = "lambda_factor")]
    pub lambda: Option<f64>,
    /// Penalty as a fraction of the empty-mask fidelity per unit.
    #[arg(long)]
    pub lambda_factor: Option<f64>,
    #[arg(long)]
    pub max_units: Option<usize>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Pseudo-count added to every histogram bin.
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub sigma_min: Option<f64>,
    /// Percentile of pair KLs above which a pair counts as high.
    #[arg(long, conflicts_with = "gate")]
    pub gate_percentile: Option<f64>,
    /// Fixed KL gate.
    #[arg(long)]
    pub gate: Option<f64>,
    /// Fit label Gaussians over every per-image cosine instead of pair means.
    #[arg(long)]
    pub pooled: bool,
    #[arg(long)]
    pub cosine_threshold: Option<f64>,
    #[arg(long)]
    pub deviation_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `attr_i,attr_j,label` lines.
    #[arg(long)]
    pub relations: PathBuf,
    /// Existing output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Export heat maps for this many leading images.
    #[arg(long)]
    pub heatmaps: Option<usize>,
    #[command(flatten)]
    pub diagnosis: DiagnosisFlags,
    #[command(flatten)]
    pub labels: LabelFlags,
}

/// Parsed `--seeds` value.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seed_list(s: &str) -> Result<SeedList, String> {
    config::parse_seeds(s).map(SeedList)
}

#[derive(Debug, Args)]
pub struct Experiment2Args {
    /// Existing output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed count `N` (seeds 1..=N) or a comma-separated list.
    #[arg(long, value_parser = parse_seed_list)]
    pub seeds: Option<SeedList>,
    /// Comma-separated bias levels.
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Use a fixed reference Gaussian with this mean instead of the control fit.
    #[arg(long, requires = "reference_sigma")]
    pub reference_mu: Option<f64>,
    #[arg(long, requires = "reference_mu")]
    pub reference_sigma: Option<f64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub diagnosis: DiagnosisFlags,
}

#[derive(Debug, Args)]
pub struct Experiment3Args {
    /// Existing output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed count `N` (seeds 1..=N) or a comma-separated list.
    #[arg(long, value_parser = parse_seed_list)]
    pub seeds: Option<SeedList>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub test_samples: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub diagnosis: DiagnosisFlags,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset the pattern mask is selected over.
    #[arg(long)]
    pub data: PathBuf,
    /// Image index within the dataset.
    #[arg(long)]
    pub image: usize,
    /// Attribute name.
    #[arg(long)]
    pub attribute: String,
    /// Output stem; `.pgm`, `.json` and `.bltn` are appended.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub diagnosis: DiagnosisFlags,
    #[command(flatten)]
    pub labels: LabelFlags,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
