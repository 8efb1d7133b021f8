//! `semid`: generate a synthetic corpus, learn Semantic IDs with an RQ-VAE,
//! and compare item representations in a sequential CTR ranker.

mod commands;
mod experiment;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    /// An input no longer matches the hash recorded in the manifest.
    Stale(String),
    Numeric(String),
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Io(_) | Self::Stale(_) => 3,
            Self::Numeric(_) => 4,
            Self::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Io(m) | Self::Numeric(m) | Self::Internal(m) => f.write_str(m),
            Self::Stale(m) => write!(f, "stale input: {m}"),
        }
    }
}

impl From<semid::Error> for CliError {
    fn from(e: semid::Error) -> Self {
        use semid::Error as E;
        let msg = e.to_string();
        match e {
            _ if e.is_numeric() => Self::Numeric(msg),
            _ if e.is_io() => Self::Io(msg),
            E::UnknownItem(_) => Self::Io(msg),
            E::Frozen | E::NotFrozen => Self::Internal(msg),
            _ => Self::Usage(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "semid", version, about = "Semantic ID pipeline: corpus generation, RQ-VAE training, ID assignment and ranking experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and click log.
    GenData(GenDataArgs),
    /// Train an RQ-VAE on corpus embeddings and write a frozen checkpoint.
    TrainRqvae(TrainArgs),
    /// Assign a packed Semantic ID to every corpus item.
    Encode(EncodeArgs),
    /// Per-prefix similarity and subtrie-size report.
    AnalyzeTrie(AnalyzeArgs),
    /// Train and evaluate rankers for every comparison in an experiment config.
    RunExperiment(ExperimentArgs),
    /// Compare bigram rankers built from RQ-VAEs trained on two corpus snapshots.
    StabilityStudy(StabilityArgs),
}

#[derive(Debug, Args)]
pub struct ManifestArg {
    /// Manifest recording artifact hashes; inputs listed in it are verified.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub num_items: usize,
    #[arg(long, default_value_t = 256)]
    pub embedding_dim: usize,
    /// Children per node at each tree level.
    #[arg(long, value_delimiter = ',', default_value = "8,16,8")]
    pub branching: Vec<usize>,
    /// Offset scale per tree level, then per-item noise; strictly decreasing.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.35,0.12,0.04")]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 1.2)]
    pub power_law_alpha: f64,
    #[arg(long, default_value_t = 10)]
    pub num_days: u32,
    /// Fraction of items arriving after day 0.
    #[arg(long, default_value_t = 0.3)]
    pub new_fraction: f64,
    #[arg(long, default_value_t = 5000)]
    pub events_per_day: usize,
    /// Also write a later snapshot (`corpus_later.bin`, `interactions_later.bin`)
    /// whose hierarchy gains this fraction of new leaves.
    #[arg(long)]
    pub drift_fraction: Option<f64>,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct RqVaeArgs {
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 64)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
    #[arg(long, default_value_t = 64)]
    pub codebook_size: usize,
    #[arg(long, default_value_t = 0.25)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Codes used at most this many times in a batch are reset.
    #[arg(long, default_value_t = 0)]
    pub reset_threshold: u32,
    #[arg(long)]
    pub no_resets: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step training log; defaults to `<out>.log.tsv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub rqvae: RqVaeArgs,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub bits_per_token: u32,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub sid_map: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pairs sampled from any prefix group larger than this.
    #[arg(long, default_value_t = 2000)]
    pub max_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// key=value experiment file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    /// Earlier corpus snapshot.
    #[arg(long)]
    pub early: PathBuf,
    /// Later corpus snapshot; rankers train and evaluate on its items.
    #[arg(long)]
    pub later: PathBuf,
    /// Click log over the later snapshot; generated per seed when omitted.
    #[arg(long)]
    pub interactions: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub rqvae_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 9)]
    pub train_days: u32,
    #[arg(long, default_value_t = 5000)]
    pub events_per_day: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[command(flatten)]
    pub rqvae: RqVaeArgs,
    #[command(flatten)]
    pub manifest: ManifestArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::TrainRqvae(a) => commands::train_rqvae(&a),
        Command::Encode(a) => commands::encode(&a),
        Command::AnalyzeTrie(a) => commands::analyze_trie(&a),
        Command::RunExperiment(a) => commands::run_experiment(&a),
        Command::StabilityStudy(a) => commands::stability_study(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
