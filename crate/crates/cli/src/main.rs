use std::path::PathBuf;
use std::process::ExitCode;

use blockdiff::bench::{self, ExperimentConfig, Inputs, Overrides, Report};
use blockdiff::Result;
use clap::{Args, Parser, Subcommand};

/// Block-diffusion OCR experiments on synthetic glyph documents.
#[derive(Parser, Debug)]
#[command(name = "blockdiff", version)]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Decode worker threads; overrides the config file.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct CorpusArgs {
    /// Corpus directory (default: <out>/corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct ModelArgs {
    /// Model checkpoint (default: <out>/model.bdif).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Split to evaluate: train, val or test.
    #[arg(long)]
    split: Option<String>,
    /// Fill TPS and wall-clock columns (breaks byte-identical reruns).
    #[arg(long)]
    timing: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a corpus and write its train/val/test splits.
    Gen(CorpusArgs),
    /// Train a model on the train split.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Where to write the checkpoint (default: <out>/model.bdif).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Decode a split and write predictions.
    Decode {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Prediction file (default: <out>/predictions.tsv).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also write per-step commit traces.
        #[arg(long)]
        trace: bool,
    },
    /// Score a prediction file against its split.
    Score {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Dynamic decoding across commit thresholds.
    SweepThreshold {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Static schedules against a dynamic threshold.
    CompareSchedulers {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Full attention with preset lengths against block attention.
    AblateAttention,
    /// Left-to-right against block diffusion on word-shuffled text.
    ShuffleRobustness,
    /// Consistency-based hard-case mining on the validation split.
    Mine {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Two-stage curriculum against each stage alone.
    Finetune,
}

fn model_inputs(corpus: CorpusArgs, model: ModelArgs) -> Inputs {
    Inputs {
        corpus_dir: corpus.corpus,
        model: model.model,
        split: model.split,
        timing: model.timing,
        ..Default::default()
    }
}

fn run(cli: Cli) -> Result<Report> {
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out,
        workers: cli.workers,
    };
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides)?,
        None => ExperimentConfig::from_ini_str("", &overrides)?,
    };
    match cli.command {
        Command::Gen(c) => bench::run_gen(&cfg, &Inputs { corpus_dir: c.corpus, ..Default::default() }),
        Command::Train { corpus, model } => bench::run_train(
            &cfg,
            &Inputs { corpus_dir: corpus.corpus, model, ..Default::default() },
        ),
        Command::Decode { corpus, model, predictions, trace } => {
            let inputs = Inputs { predictions, trace, ..model_inputs(corpus, model) };
            bench::run_decode(&cfg, &inputs)
        }
        Command::Score { corpus, predictions, split } => bench::run_score(
            &cfg,
            &Inputs { corpus_dir: corpus.corpus, predictions, split, ..Default::default() },
        ),
        Command::SweepThreshold { corpus, model } => bench::run_sweep(&cfg, &model_inputs(corpus, model)),
        Command::CompareSchedulers { corpus, model } => bench::run_compare(&cfg, &model_inputs(corpus, model)),
        Command::AblateAttention => bench::run_ablate(&cfg, &Inputs::default()),
        Command::ShuffleRobustness => bench::run_shuffle(&cfg, &Inputs::default()),
        Command::Mine { corpus, model } => bench::run_mine(
            &cfg,
            &Inputs { corpus_dir: corpus.corpus, model, ..Default::default() },
        ),
        Command::Finetune => bench::run_finetune(&cfg, &Inputs::default()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            print!("{}", report.summary);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
