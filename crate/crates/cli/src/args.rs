use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "loid", version, about = "Review-encoder plugins and ID-aligned rating prediction")]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded two-domain synthetic corpus as JSON Lines.
    GenSynth(GenSynthArgs),
    /// Build a vocabulary and a randomly initialized base encoder.
    InitBase(InitBaseArgs),
    /// Train a low-rank adapter on a source domain.
    Pretrain(PretrainArgs),
    /// Merge adapters into a base encoder with drop-and-rescale.
    Merge(MergeArgs),
    /// Train a target model on a (merged or plain) base encoder.
    Train(TrainArgs),
    /// Score a target checkpoint on its held-out split.
    Eval(EvalArgs),
    /// Cosine similarity between two domains' mean review embeddings.
    DomainSim(DomainSimArgs),
    /// Pretrain sources, then train and score the target for every source subset.
    Transfer(TransferArgs),
}

/// Training settings; flags override the `--config` file, which overrides
/// the desk defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Drop probability for merging.
    #[arg(long)]
    pub p: Option<f64>,
    /// Train without the contrastive ID-alignment term.
    #[arg(long)]
    pub no_cl: bool,
    /// Evaluation repeats.
    #[arg(long)]
    pub repeats: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Output directory; receives `<domain>.jsonl` per domain.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synthetic-corpus spec.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Reviews per domain.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InitBaseArgs {
    /// Comma-separated review files the vocabulary is built from.
    #[arg(long, value_delimiter = ',', required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: Overrides,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Base encoder; when absent one is initialized from `--data` and written
    /// to `<out>.base.loid`.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: Overrides,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Comma-separated adapter files; empty merges nothing.
    #[arg(long, value_delimiter = ',', num_args = 0..=1, default_value = "")]
    pub adapters: Vec<String>,
    #[arg(long, default_value_t = 0.9)]
    pub p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// History-sampling seed; defaults to the checkpoint's training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Per-sample predictions CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DomainSimArgs {
    /// `<target>,<source>` review files.
    #[arg(long, value_delimiter = ',', num_args = 1, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub base: PathBuf,
    /// Reviews sampled per domain.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Transfer report whose single-source row fills the MSE columns.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CSV report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Target review file.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated source review files; each is labeled by its file stem.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sources: Vec<PathBuf>,
    #[arg(long)]
    pub base: PathBuf,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: Overrides,
}
