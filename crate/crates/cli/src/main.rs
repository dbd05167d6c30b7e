mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "segqc", version, about = "Estimate segmentation label quality without a reference mask")]
struct Cli {
    /// Seed for corpus synthesis, training, bias permutations and the random selector.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// JSON config with optional `corpus`, `regressor`, `loss`, `report` and `embedding` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a synthetic corpus of degraded masks with exact Dice labels.
    Synth(SynthArgs),
    /// Build or validate a class-embedding table.
    Embed(EmbedArgs),
    /// Train the quality regressor on a corpus.
    Train(TrainArgs),
    /// Predict Dice for a corpus split or a single image/mask pair.
    Estimate(EstimateArgs),
    /// Correlation and retrieval metrics for records with known Dice.
    EvalMetrics(EvalArgs),
    /// Dataset quality report with subgroup bias tests.
    Report(ReportArgs),
    /// Rank volumes for annotation or pseudo-label use.
    Select(SelectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Phantom volumes (ignored when the config supplies a corpus section).
    #[arg(long, default_value_t = 20)]
    volumes: usize,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',', default_value = "liver,spleen,left kidney,pancreas,stomach")]
    classes: Vec<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProviderKind {
    OneHot,
    Hash,
    Precomputed,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// Output table file.
    #[arg(long)]
    out: PathBuf,
    /// Take the class vocabulary from this corpus.
    #[arg(long, conflicts_with = "classes")]
    corpus: Option<PathBuf>,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    #[arg(long, value_enum)]
    provider: Option<ProviderKind>,
    /// Dimension for hashed vectors.
    #[arg(long)]
    dim: Option<usize>,
    /// Precomputed vector file.
    #[arg(long)]
    file: Option<PathBuf>,
    /// Prompt template: an index into the built-in list or a string containing [CLS].
    #[arg(long)]
    template: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    table: PathBuf,
    /// Directory for per-epoch checkpoints, the final model and the loss log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Zero the condition input.
    #[arg(long)]
    unconditioned: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    table: PathBuf,
    /// Estimate every record of this corpus.
    #[arg(long, conflicts_with_all = ["image", "mask"])]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Image volume (.nii, .nii.gz or portable).
    #[arg(long, requires_all = ["mask", "class"])]
    image: Option<PathBuf>,
    /// Mask or label map aligned with the image.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    class: Option<u8>,
    /// Slices averaged per volume; 0 uses every occupied slice.
    #[arg(long, default_value_t = 10)]
    slices: usize,
    /// QualityRecord JSONL output (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "5,10")]
    ks: Vec<usize>,
    /// Report JSON (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// predicted,actual,class_id CSV.
    #[arg(long)]
    scatter: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    /// JSON array of subject metadata.
    #[arg(long, conflicts_with = "corpus")]
    meta: Option<PathBuf>,
    /// Take metadata and class names from this corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out_json: PathBuf,
    /// Per-organ CSV.
    #[arg(long)]
    out_csv: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodArg {
    Quality,
    Entropy,
    McDropout,
    Random,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Goal {
    /// Worst first, for review.
    Annotate,
    /// Best first, for self-training.
    Pseudo,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "annotate")]
    goal: Goal,
    /// Number of volumes to return.
    #[arg(long)]
    n: usize,
    /// QualityRecord JSONL (quality method; also supplies ids for random).
    #[arg(long)]
    records: Option<PathBuf>,
    /// Probability volumes in the portable format. For mc-dropout, files
    /// sharing a volume id are the passes of that volume.
    #[arg(long, num_args = 1..)]
    probs: Vec<PathBuf>,
    /// Id list output, one per line (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let cfg = config::CliConfig::load(cli.config.as_deref())?;
    let ctx = commands::Context { seed: cli.seed, config: cfg };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Embed(a) => commands::embed(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Estimate(a) => commands::estimate(&ctx, a),
        Command::EvalMetrics(a) => commands::eval_metrics(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
        Command::Select(a) => commands::select(&ctx, a),
    }
}
