//! `maskfix` command-line driver.
//!
//! Files are the data interface: every subcommand writes `manifest.txt` into
//! its output directory before doing any work, then its results next to it.
//! Diagnostics go to stderr and nothing is printed to stdout.
//!
//! Exit codes:
//!
//! | code | meaning                                             |
//! |------|-----------------------------------------------------|
//! | 0    | success                                             |
//! | 1    | any other failure (numeric blow-up, I/O mid-run)    |
//! | 2    | bad config key, value or flag                       |
//! | 3    | dataset missing or unreadable                       |
//! | 4    | checkpoint unreadable or inconsistent with the run  |
//! | 5    | output directory cannot be created or written       |

mod eval;
mod exit;
mod manifest;
mod orders;
mod sample;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use exit::CliError;

#[derive(Parser, Debug)]
#[command(name = "maskfix", version, about = "Self-correcting masked token generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a predictor from a `key = value` config.
    Train(TrainArgs),
    /// Generate token grids from a checkpoint.
    Sample(SampleArgs),
    /// Run an evaluation experiment and write a report CSV.
    Eval(EvalArgs),
    /// Render visit orders as PGM images.
    Orders(OrdersArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, later values win over earlier ones and
    /// over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Expected grid height; must match the checkpoint.
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Class id; the number of classes selects the unconditional label.
    #[arg(long, default_value_t = 0)]
    pub class: usize,
    /// Reveal steps, default `min(32, n)`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value = "halton")]
    pub order: String,
    #[arg(long, default_value = "arccos")]
    pub scheduler: String,
    /// `off`, `random` or a fixed offset.
    #[arg(long, default_value = "off")]
    pub roll: String,
    #[arg(long = "cfg", default_value_t = 0.0)]
    pub cfg_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Comma-separated per-step temperatures.
    #[arg(long)]
    pub temperatures: Option<String>,
    /// `on` or `off`.
    #[arg(long, default_value = "on")]
    pub correction: String,
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 1)]
    pub budget: usize,
    /// Default `min(6, steps - 1)`.
    #[arg(long)]
    pub start_step: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub passes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of samples; sample `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Quantizer levels per channel for PPM output; taken from the checkpoint
    /// when it was trained on images.
    #[arg(long)]
    pub q: Option<u32>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// `xor`, `sequential` or `reconstruction`.
    #[arg(long)]
    pub experiment: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sampler draws for `xor` and `sequential`.
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    /// Model for `reconstruction`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `stripes`, `gradients` or an image directory.
    #[arg(long, default_value = "stripes")]
    pub dataset: String,
    /// Held-out grids drawn from a synthetic dataset.
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 16)]
    pub q: u32,
    #[arg(long, default_value_t = 0.37)]
    pub context_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.01)]
    pub top_fraction: f64,
}

#[derive(Args, Debug)]
pub struct OrdersArgs {
    /// Side of a square grid.
    #[arg(long, conflicts_with_all = ["height", "width"])]
    pub size: Option<usize>,
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
    /// Order kind, repeatable; `all` or nothing renders every kind.
    #[arg(long)]
    pub kind: Vec<String>,
    /// Seed of the random order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Worker count for embarrassingly parallel loops: `MASKFIX_THREADS` if set,
/// otherwise the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var("MASKFIX_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train::run(&a),
        Command::Sample(a) => sample::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Orders(a) => orders::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            eprint!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(exit::BAD_CONFIG);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("maskfix: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
