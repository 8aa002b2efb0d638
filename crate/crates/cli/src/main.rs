//! `gpn`: prepare Omniglot caches, train, evaluate and export figure data.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gpn::data::DamageRule;

#[derive(Parser, Debug)]
#[command(name = "gpn", version, about = "Gaussian prototypical networks for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest an Omniglot directory into train and test caches.
    Prepare(PrepareArgs),
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the best five of a run) on a test cache.
    Eval(EvalArgs),
    /// Export PCA or covariance-histogram data as CSV.
    Export(ExportArgs),
    /// Write a synthetic dataset with the Omniglot directory layout.
    Fixture(FixtureArgs),
}

#[derive(clap::Args, Debug)]
struct PrepareArgs {
    /// Directory holding images_background and images_evaluation.
    #[arg(long)]
    omniglot_dir: PathBuf,
    /// Output path; the caches are written as `<stem>.train.bin` and `<stem>.test.bin`.
    #[arg(long)]
    out: PathBuf,
    /// Keep only the unrotated classes.
    #[arg(long)]
    no_augment: bool,
    /// Accept alphabets and character counts that differ from the standard release.
    #[arg(long)]
    lenient: bool,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    max_episodes: Option<u64>,
    #[arg(long)]
    train_classes: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    /// Continue from a checkpoint written with `save_optimizer`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every this many episodes (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    /// A checkpoint file, or with --best5 a run or checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    n_way: Option<usize>,
    /// Comma-separated shots; defaults to 1..=19.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run configuration supplying eval defaults; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Average the five checkpoints with the best training accuracy.
    #[arg(long)]
    best5: bool,
    /// Training metrics CSV used to rank checkpoints for --best5.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExportKind {
    Pca,
    CovHist,
}

#[derive(clap::Args, Debug)]
struct ExportArgs {
    #[arg(long, value_enum)]
    kind: ExportKind,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of images taken from the start of the cache (default: 500 for pca, all for cov-hist).
    #[arg(long)]
    images: Option<usize>,
    /// Add one fused prototype per class to the PCA points.
    #[arg(long)]
    prototypes: bool,
    /// Compare against a damaged copy of the cache.
    #[arg(long)]
    damage_copy: bool,
    /// Compare against a previously damaged cache instead.
    #[arg(long, conflicts_with = "damage_copy")]
    damaged_cache: Option<PathBuf>,
    /// Damage rules for --damage-copy as `fraction:size` pairs.
    #[arg(long, value_delimiter = ',', value_parser = parse_rule, default_value = "0.25:24,0.15:20,0.1:16")]
    damage_rules: Vec<DamageRule>,
    #[arg(long, default_value_t = 0)]
    damage_seed: u64,
    #[arg(long, default_value_t = 200)]
    batch_size: usize,
}

#[derive(clap::Args, Debug)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap the characters per alphabet (the result then needs `prepare --lenient`).
    #[arg(long)]
    max_chars: Option<usize>,
}

fn parse_rule(s: &str) -> Result<DamageRule, String> {
    let (f, t) = s.split_once(':').ok_or_else(|| format!("expected fraction:size, got `{s}`"))?;
    Ok(DamageRule {
        fraction: f.trim().parse().map_err(|_| format!("bad fraction `{f}`"))?,
        target_size: t.trim().parse().map_err(|_| format!("bad target size `{t}`"))?,
    })
}

/// A command failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, configuration or missing inputs (exit 2).
    Usage(anyhow::Error),
    /// Anything that went wrong while doing the work (exit 1).
    Runtime(anyhow::Error),
}

impl From<gpn::Error> for Failure {
    fn from(e: gpn::Error) -> Self {
        match e {
            gpn::Error::Config(_) => Failure::Usage(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    commands::tune_allocator();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Export(a) => commands::export(a),
        Command::Fixture(a) => commands::fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
