//! `hmmrf`: train, tune, and run the hybrid HMM / random-forest opcode
//! sequence classifier from the command line.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use hmmrf_core::eval::PipelineKind;
use hmmrf_core::forest::{MaxFeatures, SplitCriterion};

#[derive(Parser)]
#[command(
    name = "hmmrf",
    version,
    about = "Malware-family classification from opcode sequences: per-family HMMs feeding a random forest",
    after_help = "Environment: HMMRF_THREADS caps worker parallelism (0 = sequential)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from planted per-family models.
    GenCorpus(GenCorpusArgs),
    /// Train a classifier on a corpus and report held-out metrics.
    Train(TrainArgs),
    /// Exhaustive hyperparameter grid search with sweep summaries.
    Grid(GridArgs),
    /// Classify opcode sequence files with a trained model.
    Classify(ClassifyArgs),
    /// Evaluate a trained model against a labeled corpus.
    Eval(EvalArgs),
}

/// `min:max` sequence length bounds.
#[derive(Debug, Clone, Copy)]
struct LengthRange(usize, usize);

impl FromStr for LengthRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| format!("expected min:max, got {s:?}"))?;
        let lo = lo.parse().map_err(|e| format!("bad minimum: {e}"))?;
        let hi = hi.parse().map_err(|e| format!("bad maximum: {e}"))?;
        Ok(LengthRange(lo, hi))
    }
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Number of malware families to plant.
    #[arg(long, default_value_t = 3)]
    families: usize,
    /// Samples generated per family.
    #[arg(long, default_value_t = 120)]
    samples: usize,
    /// Hidden states in each planted model.
    #[arg(long, default_value_t = 4)]
    states: usize,
    /// Opcode alphabet size.
    #[arg(long, default_value_t = 30)]
    symbols: usize,
    /// Sequence length bounds as min:max.
    #[arg(long, default_value = "300:800")]
    len: LengthRange,
    /// Emission separation between families, 0 (identical) to 1 (disjoint).
    #[arg(long, default_value_t = 0.8)]
    separation: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus root: one directory per family of .opseq files.
    #[arg(long)]
    corpus: PathBuf,
    /// Opcode truncation length L.
    #[arg(long = "L", default_value_t = 50)]
    l: usize,
    /// Hidden states per family HMM.
    #[arg(long, default_value_t = 20)]
    states: usize,
    /// Trees in the forest.
    #[arg(long, default_value_t = 150)]
    trees: usize,
    #[arg(long, default_value = "gini")]
    criterion: SplitCriterion,
    #[arg(long, default_value = "sqrt")]
    max_features: MaxFeatures,
    /// Stop when the log-likelihood change drops below this.
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    #[arg(long = "min-iters", default_value_t = 10)]
    min_iters: usize,
    #[arg(long = "max-iters", default_value_t = 200)]
    max_iters: usize,
    /// Multiplicative jitter applied to the near-uniform initial model.
    #[arg(long, default_value_t = 0.01)]
    jitter: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long = "test-fraction", default_value_t = 0.2)]
    test_fraction: f64,
    /// Drop families with fewer samples than this before splitting.
    #[arg(long = "min-class-samples", default_value_t = 1)]
    min_class_samples: usize,
    /// Cap on concatenated training symbols per family.
    #[arg(long = "max-train-symbols", default_value_t = hmmrf_core::pipeline::DEFAULT_MAX_TRAIN_SYMBOLS)]
    max_train_symbols: usize,
    /// Bootstrap-resample the training set per tree.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    bootstrap: bool,
    /// Pipeline to train: hmm-rf, or raw for the opcode-id baseline.
    #[arg(long, default_value = "hmm-rf")]
    baseline: String,
    /// Output model path; the report, manifest, and dropped.csv are written
    /// beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated truncation lengths.
    #[arg(long = "L", value_delimiter = ',', default_value = "25,50,100,200")]
    l: Vec<usize>,
    /// Comma-separated tree counts.
    #[arg(long, value_delimiter = ',', default_value = "1,10,100,150,200")]
    trees: Vec<usize>,
    /// Comma-separated split criteria.
    #[arg(long, value_delimiter = ',', default_value = "gini,entropy,log_loss")]
    criterion: Vec<SplitCriterion>,
    /// Comma-separated feature-subset rules.
    #[arg(long, value_delimiter = ',', default_value = "sqrt,log2,all")]
    max_features: Vec<MaxFeatures>,
    /// Pipeline kind: hmm-rf or raw-rf.
    #[arg(long, default_value = "hmm-rf")]
    kind: PipelineKind,
    #[arg(long, default_value_t = 20)]
    states: usize,
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    #[arg(long = "min-iters", default_value_t = 10)]
    min_iters: usize,
    #[arg(long = "max-iters", default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 0.01)]
    jitter: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long = "test-fraction", default_value_t = 0.2)]
    test_fraction: f64,
    /// Carve this stratified fraction aside before the search and score the
    /// selected model on it, separating selection from final reporting.
    /// 0 disables the third split: the best cell is then reported on the
    /// same test split that selected it, which is optimistic.
    #[arg(long = "holdout-fraction", default_value_t = 0.0)]
    holdout_fraction: f64,
    #[arg(long = "min-class-samples", default_value_t = 1)]
    min_class_samples: usize,
    #[arg(long = "max-train-symbols", default_value_t = hmmrf_core::pipeline::DEFAULT_MAX_TRAIN_SYMBOLS)]
    max_train_symbols: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    bootstrap: bool,
    /// Retrain HMMs and features per cell instead of caching them.
    #[arg(long = "no-cache", default_value_t = false)]
    no_cache: bool,
    /// Output directory for results.csv, sweeps, and the best model.
    #[arg(long = "out-dir")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Trained model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Emit one JSON object per line instead of tab-separated text.
    #[arg(long)]
    json: bool,
    /// Opcode sequence files (.opseq), one mnemonic per line.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model JSON.
    #[arg(long)]
    model: PathBuf,
    /// Labeled corpus to evaluate against.
    #[arg(long)]
    corpus: PathBuf,
    /// Report JSON output path.
    #[arg(long)]
    out: PathBuf,
}

fn init_threads() {
    if let Ok(value) = std::env::var("HMMRF_THREADS") {
        if let Ok(requested) = value.trim().parse::<usize>() {
            let threads = if requested == 0 { 1 } else { requested };
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        } else {
            eprintln!("warning: ignoring unparseable HMMRF_THREADS={value:?}");
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(args) => commands::gen_corpus(args),
        Command::Train(args) => commands::train(args),
        Command::Grid(args) => commands::grid(args),
        Command::Classify(args) => commands::classify(args),
        Command::Eval(args) => commands::eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(1)
        }
    }
}
