mod backends;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Explanation-keyed demonstration retrieval for few-shot grammatical error correction.
#[derive(Debug, Parser)]
#[command(name = "gee", version)]
struct Cli {
    /// TOML file with default option values (overridden by flags, then by GEE_* variables).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Explain a labeled corpus with a teacher model and build both sample databases.
    BuildDb(BuildDbArgs),
    /// Correct a test set with retrieved demonstrations.
    Predict(PredictArgs),
    /// Score predictions against gold edits (M2) or references.
    Evaluate(EvaluateArgs),
    /// Sweep the number of correct demos with a fixed demo total.
    Ablate(AblateArgs),
    /// Print the detection output for one sentence and the keys it retrieves.
    Detect(DetectArgs),
}

/// Backend endpoint, cache and prompt options shared by every command.
#[derive(Debug, Args)]
pub struct SharedArgs {
    /// Response cache directory (GEE_CACHE_DIR wins over this flag).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Base URL of the chat-completions endpoint (GEE_API_BASE wins over this flag).
    #[arg(long)]
    api_base: Option<String>,
    /// Directory of *.txt prompt templates overriding the built-in ones by name.
    #[arg(long)]
    prompt_dir: Option<PathBuf>,
    /// Worker threads [default: hardware threads, at most 8 for remote backends].
    #[arg(long)]
    jobs: Option<usize>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
pub struct BuildDbArgs {
    /// Parallel corpus (.tsv: input<TAB>correction, .jsonl: {"text","label"}).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Corpus format when the extension does not say [tsv, jsonl].
    #[arg(long)]
    format: Option<String>,
    /// Name recorded in sample ids and the manifest [default: corpus file stem].
    #[arg(long)]
    corpus_name: Option<String>,
    /// Language code; zh, ja, ko, cmn and yue tokenize per character [default: en].
    #[arg(long)]
    lang: Option<String>,
    /// Output database directory.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Teacher backend: mock:echo, mock:fixed:<text>, mock:<fixture.json> or remote:<model>.
    #[arg(long)]
    teacher: Option<String>,
    #[arg(long)]
    teacher_model: Option<String>,
    /// hashed or remote:<model> [default: hashed].
    #[arg(long)]
    embedder: Option<String>,
    /// Minimum input length in tokens [default: 10].
    #[arg(long)]
    min_tokens: Option<usize>,
    /// Maximum input length in tokens [default: 60].
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Maximum number of samples kept after length filtering [default: 25000].
    #[arg(long)]
    cap: Option<usize>,
    /// Seed for the capped subsample [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// Give the teacher the extracted edits and use the edits-based explanation prompt.
    #[arg(long)]
    explain_with_edits: bool,
    /// Exit with status 2 when more than this fraction of explanations fail [default: 0.05].
    #[arg(long)]
    max_failure_fraction: Option<f64>,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Database directory written by build-db.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Test sentences: plain text (one per line), or a .tsv/.jsonl parallel file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Predictor backend: mock:echo, mock:fixed:<text>, mock:<fixture.json> or remote:<model>.
    #[arg(long)]
    predictor: Option<String>,
    #[arg(long)]
    predictor_model: Option<String>,
    /// explanation, semantic, bm25 or random [default: explanation].
    #[arg(long)]
    strategy: Option<String>,
    /// Erroneous demonstrations [default: 4].
    #[arg(long)]
    k_e: Option<usize>,
    /// Correct demonstrations [default: 4].
    #[arg(long)]
    k_c: Option<usize>,
    /// Seed for random selection [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// none, pre or post [default: none].
    #[arg(long)]
    explanation_mode: Option<String>,
    /// detection-detailed or detection-short [default: detection-detailed].
    #[arg(long)]
    detection_template: Option<String>,
    /// Match detection output against explanation keys with BM25 instead of kNN.
    #[arg(long)]
    explanation_bm25: bool,
    /// Keep database samples whose input is identical to the test sentence.
    #[arg(long)]
    include_source_matches: bool,
    /// Language of the test set [default: the database language].
    #[arg(long)]
    lang: Option<String>,
    /// hashed or remote:<model> [default: hashed].
    #[arg(long)]
    embedder: Option<String>,
    /// Also write every assembled correction prompt to prompts.jsonl.
    #[arg(long)]
    save_prompts: bool,
    #[command(flatten)]
    shared: SharedArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
pub struct GoldArgs {
    /// Gold file: M2, or a .tsv/.jsonl parallel file.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// m2 or parallel [default: m2 for *.m2, otherwise parallel].
    #[arg(long)]
    gold_format: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// predictions.jsonl from predict, or plain text with one hypothesis per line.
    #[arg(long)]
    predictions: PathBuf,
    #[command(flatten)]
    gold: GoldArgs,
    /// Language deciding the tokenization [default: en].
    #[arg(long)]
    lang: Option<String>,
    /// Directory for report.json [default: the predictions directory].
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write per-sentence diagnostics.jsonl.
    #[arg(long)]
    diagnostics: bool,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    gold: GoldArgs,
    /// k_E + k_C for every row [default: 8].
    #[arg(long)]
    total: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// The sentence to analyze.
    sentence: String,
    #[arg(long)]
    predictor: Option<String>,
    #[arg(long)]
    predictor_model: Option<String>,
    /// detection-detailed or detection-short [default: detection-detailed].
    #[arg(long)]
    detection_template: Option<String>,
    /// Database to query with the detection output.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Number of keys to show [default: 4].
    #[arg(long)]
    k: Option<usize>,
    /// Retrieve with BM25 instead of kNN.
    #[arg(long)]
    bm25: bool,
    #[arg(long)]
    embedder: Option<String>,
    #[command(flatten)]
    shared: SharedArgs,
}

/// Exit statuses: 0 success, 1 usage or configuration error, 2 partial failure.
pub enum Outcome {
    Success,
    Partial,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let file = match config::FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::BuildDb(a) => commands::build_db(a, &file),
        Command::Predict(a) => commands::predict(a, &file),
        Command::Evaluate(a) => commands::evaluate(a, &file),
        Command::Ablate(a) => commands::ablate(a, &file),
        Command::Detect(a) => commands::detect(a, &file),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
