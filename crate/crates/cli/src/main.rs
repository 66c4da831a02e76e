use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{Budget, Flags};

/// Command-line driver: synthetic data, pretraining, fine-tuning and the
/// evaluation harness. Flags override keys of the --config file, which
/// override the --budget preset, which overrides built-in defaults.
#[derive(Parser, Debug)]
#[command(name = "cehr", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration file (TOML) [default: none, built-in defaults]
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory [default: out]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed for data, initialization, masking and splits [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel fold jobs [default: 1]
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Model variant: CEHR-BERT, M-BERT, B-BERT, NS-BERT, NT-BERT, ALT-BERT,
    /// V-BERT, R-BERT, LR or Bi-LSTM [default: CEHR-BERT]
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Fraction of each training split used by finetune and evaluate [default: 1.0]
    #[arg(long, global = true)]
    fraction: Option<f64>,
    /// Comma-separated task names [default: gap_signal]
    #[arg(long, alias = "task", global = true, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Pretrained weights [default: <out>/model.cehrw]
    #[arg(long, global = true, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Size preset [default: tiny]
    #[arg(long, global = true, value_enum)]
    budget: Option<Budget>,
    /// Directory with persons.csv, visits.csv and events.csv [default: <out>]
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic event store and its rollup hierarchy
    Synth,
    /// Per-patient visit and record summary statistics
    Stats,
    /// Pretrain the encoder of --variant on every eligible patient
    Pretrain,
    /// Fine-tune on the first fold of each task and write test predictions
    Finetune,
    /// Four-fold evaluation of --variant on each task
    Evaluate,
    /// Evaluation over the configured training fractions
    Fewshot,
    /// The full ablation grid, pretraining every row
    Ablate,
    /// 2-D PCA of the artificial time token embeddings
    VizAtt,
    /// Median and 95th percentile sequence length per task and representation
    Lengths,
    /// Parameter counts of every encoder variant
    Params,
}

/// An error with its process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub msg: String,
}

impl Exit {
    pub fn missing(path: &Path) -> Self {
        Self {
            code: 2,
            msg: format!("missing file: {}", path.display()),
        }
    }

    pub fn config(problems: Vec<String>) -> Self {
        Self {
            code: 3,
            msg: format!("invalid config: {}", problems.join("; ")),
        }
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Exit {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let g = cli.global;
    let flags = Flags {
        seed: g.seed,
        out: g.out,
        jobs: g.jobs,
        budget: g.budget,
        data: g.data,
        checkpoint: g.checkpoint,
        variant: g.variant,
        fraction: g.fraction,
        tasks: g.tasks,
    };
    let result = config::resolve(g.config.as_deref(), &flags).and_then(|cfg| commands::run(cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(1, |x| x.code);
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(code)
        }
    }
}
