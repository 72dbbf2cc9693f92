//! `tilesparse` command-line tool.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 I/O or file-format error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "tilesparse", version, about = "Tile-wise sparse GEMM: prune, verify, bench, analyze, train")]
#[command(args_override_self = true)]
#[command(after_help = "Any subcommand also accepts --config FILE with key = value lines \
(keys are long flag names); flags on the command line take precedence.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the reference MLP on synthetic data and write a checkpoint.
    Train(TrainArgs),
    /// Prune a checkpoint tile-wise in stages with masked fine-tuning.
    Prune(PruneArgs),
    /// Compare tile-wise execution against the dense oracle on random inputs.
    Verify(VerifyArgs),
    /// Time dense vs tile-wise GEMM over shapes, granularities and sparsities.
    Bench(BenchArgs),
    /// Report per-layer element-wise sparsity and zero-capture distributions.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Seed for data, initialization and shuffling.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads for GEMM.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f32,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankingArg {
    /// Each matrix reaches every stage target on its own.
    PerMatrix,
    /// All matrices share one ranking.
    Global,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to prune.
    #[arg(long)]
    pub model: PathBuf,
    /// Tile width G (multiple of 8).
    #[arg(short = 'g', long, default_value_t = 64)]
    pub granularity: usize,
    /// Final sparsity.
    #[arg(short = 's', long, default_value_t = 0.5)]
    pub sparsity: f64,
    /// Explicit stage targets, e.g. 0.2,0.3,0.4,0.5 (default: gradual to the
    /// tile-wise target).
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub schedule: Vec<f64>,
    /// Fine-tune epochs after each stage.
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f32,
    #[arg(long, value_enum, default_value_t = RankingArg::PerMatrix)]
    pub ranking: RankingArg,
    /// Apriori tuning as N1,N2: force-prune the N1 columns an element-wise
    /// pruning empties most, protect the N2 it empties least.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', value_name = "N1,N2")]
    pub apriori: Vec<usize>,
    /// Element-wise share restored on top of the tile pattern.
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    /// Output directory for patterns, overlays, checkpoint and summary.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint holding the weights.
    #[arg(long)]
    pub model: PathBuf,
    /// Pattern files, one per prunable layer, or one directory holding
    /// layer<i>.twpt files.
    #[arg(long, num_args = 1.., required = true)]
    pub patterns: Vec<PathBuf>,
    /// Random input probes.
    #[arg(long, default_value_t = 20)]
    pub probes: usize,
    /// Rows of each random input.
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Problem shapes as MxKxN.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "256x768x3072")]
    pub shapes: Vec<String>,
    /// Tile widths.
    #[arg(short = 'g', long, action = ArgAction::Set, value_delimiter = ',', default_value = "128")]
    pub granularity: Vec<usize>,
    /// Sparsity sweep.
    #[arg(short = 's', long, action = ArgAction::Set, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,0.9,0.99")]
    pub sparsity: Vec<f64>,
    /// Element-wise share restored on top of each tile pattern.
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    /// Timed repeats per configuration (at least 5).
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Score the prunable layers of this checkpoint with |g * w|.
    #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
    pub model: Option<PathBuf>,
    /// Precomputed score matrices.
    #[arg(long, num_args = 1..)]
    pub scores: Vec<PathBuf>,
    /// Element-wise sparsity to analyze.
    #[arg(short = 's', long, default_value_t = 0.75)]
    pub sparsity: f64,
    /// Strip width compared against the blocks.
    #[arg(short = 'g', long, default_value_t = 64)]
    pub granularity: usize,
    /// Square block edges.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "8")]
    pub blocks: Vec<usize>,
    /// Output directory for layers.csv and cdf.csv (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return commands::exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::VerifyFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            commands::exit_code(&e)
        }
    }
}
