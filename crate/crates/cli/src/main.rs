//! `bcd` — generate synthetic data, train and evaluate the part-aware model,
//! run ablation sweeps, and dump diagnostics.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime numeric error
//! (training aborts on a non-finite loss).

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bcd_core::Error;
use overrides::ConfigOverrides;

#[derive(Parser)]
#[command(name = "bcd", version, about = "Batch-coherence part-aware re-identification harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic misaligned-pedestrian dataset.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Compute Rank-1/CMC/mAP for a checkpoint or for raw embedding files.
    Evaluate(EvaluateArgs),
    /// Train and evaluate a set of ablation rows under shared seeds.
    Ablate(AblateArgs),
    /// Write the batch-estimated supervision matrix as .tns + CSV.
    DumpSupervision(DumpSupervisionArgs),
    /// Write per-image attention weights and their batch means as .tns + CSV.
    DumpAttention(DumpArgs),
    /// Write part/holistic height profiles and their targets as CSV.
    DumpProfiles(DumpArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_train_ids: Option<usize>,
    #[arg(long)]
    images_per_train_id: Option<usize>,
    #[arg(long)]
    num_test_ids: Option<usize>,
    #[arg(long)]
    images_per_test_id: Option<usize>,
    #[arg(long)]
    num_cameras: Option<usize>,
    #[arg(long)]
    parts: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    max_shift: Option<usize>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    gen_flip_prob: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (falls back to $BCD_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint and the training log.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory (embeds the test split of --data).
    #[arg(long, conflicts_with_all = ["query_embeddings", "gallery_embeddings"])]
    checkpoint: Option<PathBuf>,
    /// Dataset directory (falls back to $BCD_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Raw mode: query embeddings as an N×d .tns file.
    #[arg(long, requires_all = ["query_labels", "gallery_embeddings", "gallery_labels"])]
    query_embeddings: Option<PathBuf>,
    /// Raw mode: CSV with header identity,camera — one row per query.
    #[arg(long)]
    query_labels: Option<PathBuf>,
    #[arg(long)]
    gallery_embeddings: Option<PathBuf>,
    #[arg(long)]
    gallery_labels: Option<PathBuf>,
    /// Metrics JSON output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory (falls back to $BCD_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comparison table (CSV) output path.
    #[arg(long)]
    out: PathBuf,
    /// Ablation rows to run, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = default_rows())]
    rows: Vec<String>,
    /// Base seeds; each row runs once per seed at seed + row_index.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64])]
    seeds: Vec<u64>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

fn default_rows() -> Vec<String> {
    bcd_core::config::ABLATION_ROWS
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Args)]
struct DumpSupervisionArgs {
    /// Dataset directory (falls back to $BCD_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the dumps.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to load; without one a freshly seeded model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct DumpArgs {
    /// Dataset directory (falls back to $BCD_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the dumps.
    #[arg(long)]
    out: PathBuf,
    /// Trained checkpoint to inspect.
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Train(args) => commands::train(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::DumpSupervision(args) => commands::dump_supervision(args),
        Command::DumpAttention(args) => commands::dump_attention(args),
        Command::DumpProfiles(args) => commands::dump_profiles(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::NonFinite(_) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
