//! Pipeline CLI: every stage is a subcommand that reads a config file plus
//! flag overrides and writes its outputs under a run directory together
//! with a reproducibility manifest.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use chronorisk_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "chronorisk", version, about = "Time-aware clinical risk modeling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Directory that receives this run's outputs and manifest.
    #[arg(long)]
    run_dir: PathBuf,
    /// TOML config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Clone)]
struct GenOntologyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_clusters: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct GenCohortArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory holding mapping.csv / descriptions.csv / relations.csv.
    #[arg(long)]
    ontology_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_patients: Option<usize>,
    #[arg(long)]
    signal_strength: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct BuildEmbeddingsArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ontology_dir: PathBuf,
    /// Cohort directory supplying the ICD vocabulary.
    #[arg(long)]
    cohort_dir: PathBuf,
    /// Externally computed description vectors (JSON, keyed by concept id).
    #[arg(long)]
    text_vectors: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct PreprocessArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    cohort_dir: PathBuf,
    #[arg(long)]
    embeddings_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_s: Option<usize>,
    #[arg(long)]
    f_ts: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Preprocess run directory (train.json lives there).
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    embeddings_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    embeddings_dir: PathBuf,
    /// Training run directory (checkpoint.bin / checkpoint.json).
    #[arg(long)]
    checkpoint_dir: PathBuf,
    /// Decision threshold; defaults to the one stored with the checkpoint.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct StudyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    cohort_dir: PathBuf,
    #[arg(long)]
    embeddings_dir: PathBuf,
    /// Either a count (`5` means seeds 1..=5) or an explicit list (`3,7,9`).
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct ExplainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    cohort_dir: PathBuf,
    #[arg(long)]
    embeddings_dir: PathBuf,
    /// Preprocess run directory (fitted preprocess.json lives there).
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    checkpoint_dir: PathBuf,
    #[arg(long)]
    patient: String,
    /// Window start index; defaults to the patient's last window.
    #[arg(long)]
    window: Option<usize>,
    /// Also emit SVG figures.
    #[arg(long)]
    plots: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered ontology (mapping / descriptions / relations).
    GenOntology(GenOntologyArgs),
    /// Generate a synthetic longitudinal cohort with planted risk signal.
    GenCohort(GenCohortArgs),
    /// Build the frozen text+graph code-embedding matrix.
    BuildEmbeddings(BuildEmbeddingsArgs),
    /// Split, fit training-only statistics, and assemble windowed datasets.
    Preprocess(PreprocessArgs),
    /// Train the risk model with early stopping and threshold selection.
    Train(TrainArgs),
    /// Score a test dataset against a checkpoint.
    Evaluate(EvaluateArgs),
    /// Component-ablation study across seeds.
    Ablate(StudyArgs),
    /// Multi-seed study with mean ± std metrics.
    Multiseed(StudyArgs),
    /// Emit a per-patient attribution report (and optional figures).
    Explain(ExplainArgs),
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) => "config",
        Error::Data(_) => "data",
        Error::Parse { .. } => "parse",
        Error::Format(_) => "format",
        Error::Numeric(_) => "numeric",
        Error::Training(_) => "training",
        Error::Degenerate(_) => "degenerate",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 3,
        Error::Data(_) | Error::Parse { .. } | Error::Format(_) | Error::Json(_) => 4,
        Error::Numeric(_) | Error::Training(_) | Error::Degenerate(_) => 5,
        Error::Io(_) => 6,
    }
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new()
            .filter_or("CHRONORISK_LOG", "warn")
            .write_style("CHRONORISK_LOG_STYLE"),
    )
    .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenOntology(args) => commands::gen_ontology(args),
        Command::GenCohort(args) => commands::gen_cohort(args),
        Command::BuildEmbeddings(args) => commands::build_embeddings(args),
        Command::Preprocess(args) => commands::preprocess(args),
        Command::Train(args) => commands::train(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::Multiseed(args) => commands::multiseed(args),
        Command::Explain(args) => commands::explain(args),
    };
    if let Err(err) = result {
        eprintln!("error[{}]: {err}", error_kind(&err));
        std::process::exit(exit_code(&err));
    }
}
