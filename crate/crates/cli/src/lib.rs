//! `cfcal` command-line front end.

use std::fmt;
use std::path::PathBuf;

use cfcal_core::CfError;
use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod inputs;
pub mod output;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    /// Prefixes the message with the offending path.
    pub fn at(self, path: &std::path::Path) -> Self {
        Self {
            code: self.code,
            message: format!("{}: {}", path.display(), self.message),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CfError> for CliError {
    fn from(e: CfError) -> Self {
        let code = if e.is_config_error() { EXIT_CONFIG } else { EXIT_DATA };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cfcal", version, about = "Counterfactual calibration for zero-shot classifiers")]
pub struct Cli {
    /// Worker threads; defaults to available parallelism.
    #[arg(long, global = true, env = "CFCAL_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate token-effect records and write predictions as JSON lines.
    Predict(PredictArgs),
    /// Group accuracy of a prediction file against labels.
    Eval(EvalArgs),
    /// PMI table from a co-occurrence count CSV.
    Pmi(PmiArgs),
    /// Generate a synthetic two-factor dataset.
    Synth(SynthArgs),
    /// Time counterfactual synthesis and scoring.
    Bench(BenchArgs),
    /// Check CFE files and configs.
    Validate(ValidateArgs),
}

/// Calibration settings that may override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    /// JSON file with CalibrationConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "lambda")]
    pub lambda_fuse: Option<f64>,
    #[arg(long)]
    pub lambda_hat: Option<f64>,
    #[arg(long = "tau")]
    pub tau_bg: Option<f64>,
    #[arg(long = "scale")]
    pub logit_scale: Option<f64>,
    /// Contexts sampled per class (M).
    #[arg(long)]
    pub num_contexts: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Token weighting strategy: hard | soft.
    #[arg(long)]
    pub weight_mode: Option<String>,
    /// Filter-sampler score combiner: sum | max.
    #[arg(long)]
    pub pool_combiner: Option<String>,
    /// base | tde
    #[arg(long)]
    pub topk_source: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Token-effect or raw-contribution CFE files, or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    pub tokens: Vec<PathBuf>,
    /// Class dictionary CFE.
    #[arg(long)]
    pub classes: PathBuf,
    /// Context pool CFE; repeatable.
    #[arg(long = "pool")]
    pub pools: Vec<PathBuf>,
    /// Context source: none | external | internal | virtual.
    #[arg(long, default_value = "none")]
    pub variant: String,
    /// Partition size for the internal variant.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fail when a record's reconstruction error exceeds 1e-3.
    #[arg(long)]
    pub strict: bool,
    /// Add base, background and intervention vectors to each line.
    #[arg(long)]
    pub emit_components: bool,
    /// Write per-token weights to this CSV.
    #[arg(long)]
    pub weights_csv: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Run manifest; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction JSON lines.
    #[arg(long)]
    pub pred: PathBuf,
    /// CSV with image_id,label,group columns.
    #[arg(long)]
    pub labels: PathBuf,
    /// waterbirds | gender | urbancars | custom
    #[arg(long, default_value = "custom")]
    pub groups: String,
    /// Metrics JSON; standard output when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Per-group CSV.
    #[arg(long)]
    pub groups_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PmiArgs {
    /// CSV: header row of context names, one row per object with its name first.
    #[arg(long)]
    pub counts: PathBuf,
    /// Add-k smoothing applied to every cell.
    #[arg(long, default_value_t = 0.0)]
    pub smoothing: f64,
    /// Output CSV; standard output when absent.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// FactorSpec JSON.
    #[arg(long, conflicts_with = "preset")]
    pub spec: Option<PathBuf>,
    /// planted-bias | background-only | orthogonal
    #[arg(long)]
    pub preset: Option<String>,
    /// Embedding dimension for presets.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, short, default_value_t = 1000)]
    pub n: usize,
    /// Overrides the spec seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pool entries per context; 0 skips the pool.
    #[arg(long, default_value_t = 50)]
    pub pool_size: usize,
    /// Noise added to pool entries before normalization.
    #[arg(long, default_value_t = 0.02)]
    pub pool_sigma: f64,
    /// Use class and context names in group tags.
    #[arg(long)]
    pub named_groups: bool,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    #[arg(long, short, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, short, default_value_t = 100)]
    pub m: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// CFE files or directories.
    pub paths: Vec<PathBuf>,
    /// Config JSON to bounds-check.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Relative reconstruction tolerance for token records.
    #[arg(long, default_value_t = cfcal_core::token_effects::DEFAULT_RECONSTRUCTION_TOLERANCE)]
    pub tolerance: f64,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = configure_threads(cli.threads).and_then(|()| match cli.command {
        Command::Predict(a) => commands::predict::run(&a),
        Command::Eval(a) => commands::eval::run(&a),
        Command::Pmi(a) => commands::pmi::run(&a),
        Command::Synth(a) => commands::synth::run(&a),
        Command::Bench(a) => commands::bench::run(&a),
        Command::Validate(a) => commands::validate::run(&a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn configure_threads(threads: Option<usize>) -> CliResult<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::config("--threads must be at least 1"));
    }
    // a second call in the same process (tests) keeps the first pool
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("global thread pool already initialized");
    }
    Ok(())
}
