//! `latesim` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure (NaN, divergence, failed gradient check).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latesim::Error;

#[derive(Parser, Debug)]
#[command(
    name = "latesim",
    version,
    about = "Dense and late-interaction embedding toolkit"
)]
struct Cli {
    /// Worker threads for search and evaluation (results do not depend on it).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a binary store from JSONL (or binary) records.
    Index(IndexArgs),
    /// Rank the store for every query; writes a TREC run.
    Search(SearchArgs),
    /// Search and score against qrels; writes a JSON metric report.
    Eval(EvalArgs),
    /// Spearman correlation between model similarities and STS judgments.
    StsEval(StsArgs),
    /// Alignment, modality-gap and cone-effect statistics over tagged pairs.
    Diagnose(DiagnoseArgs),
    /// Two-phase toy training on synthetic data.
    Train(TrainArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
    /// Shared versus two-tower modality-gap comparison.
    GapExperiment(GapArgs),
}

#[derive(Args, Debug)]
struct IndexArgs {
    /// Input records (JSONL or binary store).
    #[arg(long)]
    input: PathBuf,
    /// Store to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SearchOpts {
    /// Search mode: dense, late or two-stage.
    #[arg(long)]
    mode: Option<String>,
    /// Hits per query.
    #[arg(long)]
    k: Option<usize>,
    /// Dense prefix length used for dense scoring.
    #[arg(long, value_name = "DIM")]
    truncate_to: Option<usize>,
    /// Dense candidates reranked in two-stage mode (default 10 * k).
    #[arg(long, value_name = "N")]
    candidate_pool: Option<usize>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    store: PathBuf,
    /// Query records (JSONL or binary store), role query.
    #[arg(long)]
    queries: PathBuf,
    #[command(flatten)]
    opts: SearchOpts,
    /// Run tag in the TREC output.
    #[arg(long, default_value = "latesim")]
    run_name: String,
    /// Output path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Qrels TSV: query_id, doc_id, relevance.
    #[arg(long)]
    qrels: PathBuf,
    /// Benchmark config (TOML, or JSON by extension); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    opts: SearchOpts,
    /// Also write the TREC run here.
    #[arg(long)]
    run: Option<PathBuf>,
    /// JSON report path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StsArgs {
    #[arg(long)]
    store: PathBuf,
    /// STS TSV: id_a, id_b, ground truth.
    #[arg(long)]
    pairs: PathBuf,
    /// dense or late.
    #[arg(long, default_value = "dense")]
    mode: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    /// Records holding the first id of each pair.
    #[arg(long)]
    left: PathBuf,
    /// Records holding the second id (defaults to --left).
    #[arg(long)]
    right: Option<PathBuf>,
    /// Pair TSV: id_a, id_b, tag (image-text, text-text, positive, negative).
    #[arg(long)]
    pairs: PathBuf,
    /// Histogram bins over [-1, 1].
    #[arg(long, default_value_t = latesim::diagnostics::DEFAULT_BINS)]
    bins: usize,
    /// Histogram CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// JSON summary path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    /// Toy training config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for held-out embeddings, queries, qrels and pair lists.
    #[arg(long, value_name = "DIR")]
    export: Option<PathBuf>,
    /// JSON report path (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    seed: u64,
    /// Random instances per loss.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GapArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            _ if e.is_numerical() => Failure::Numerical(msg),
            Error::Config(_) | Error::UnknownTask { .. } => Failure::Usage(msg),
            _ => Failure::Data(msg),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LATESIM_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = configure_threads(cli.threads).and_then(|_| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn configure_threads(threads: Option<usize>) -> Result<(), Failure> {
    let Some(n) = threads else {
        return Ok(());
    };
    if n == 0 {
        return Err(Failure::Usage("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot start {n} worker threads: {e}")))
}
