//! `vipubmed` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 partial
//! completion (some translations failed).

pub mod commands;
pub mod config;
pub mod seeds;

use std::ffi::OsString;
use std::fmt;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "vipubmed", version, about = "Vietnamese biomedical corpus and benchmark pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed from which unset stage seeds are derived.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the resolved plan as JSON and exit without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Worker threads for parallel stages (default: available processors).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse MEDLINE XML (optionally gzipped) into abstract JSON lines.
    Ingest(IngestArgs),
    /// Length filter, dedup and seeded subset of abstract JSON lines.
    Filter(FilterArgs),
    /// Translate abstract bodies with a backend.
    Translate(TranslateArgs),
    /// Build synthetic bitext and mix it with gold bitext.
    SelftrainMix(MixArgs),
    /// Produce span-corruption pretraining examples.
    Corrupt(CorruptArgs),
    /// Load MedNLI files into the pipeline's example format.
    NliLoad(NliLoadArgs),
    /// Machine-translate NLI premises and hypotheses.
    NliTranslate(NliTranslateArgs),
    /// Queue NLI refinement tasks and serve the annotation API.
    NliRefineServe(RefineServeArgs),
    /// Write ViMedNLI JSON lines / TSV and a manifest.
    NliExport(NliExportArgs),
    /// Score hypotheses against references.
    Eval(EvalArgs),
    /// Render metric report JSON files as a table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// MEDLINE XML files (.xml or .xml.gz).
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Drop abstracts with more than this many tokens.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Keep exact duplicates (dedup is on by default).
    #[arg(long)]
    pub no_dedup: bool,
    /// Keep a uniform random subset of this size.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub subset_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BackendArgs {
    /// Token-substitution lexicon (TSV source<TAB>target): use the mock backend.
    #[arg(long, conflicts_with = "endpoint")]
    pub lexicon: Option<PathBuf>,
    /// HTTP translation service URL. Token is read from VIPUBMED_TRANSLATE_TOKEN.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Retries per batch after the first attempt.
    #[arg(long)]
    pub retry_budget: Option<u32>,
    /// Completions between checkpoint flushes.
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Append-only checkpoint file; an existing one is resumed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Translate titles too (otherwise they are copied unchanged).
    #[arg(long)]
    pub with_title: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    /// Gold bitext TSV (source, target, origin, domain).
    #[arg(long)]
    pub gold: PathBuf,
    /// Ready-made synthetic bitext TSV.
    #[arg(long, conflicts_with = "mono")]
    pub synthetic: Option<PathBuf>,
    /// Monolingual abstracts to translate into synthetic bitext.
    #[arg(long)]
    pub mono: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    /// Pairs per output shard.
    #[arg(long)]
    pub shard_size: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    /// JSON lines with a `body` (or `text`) field.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub mean_span: Option<f64>,
    /// Sentinel token pattern containing `{i}`.
    #[arg(long)]
    pub sentinel_pattern: Option<String>,
    /// Stage seed (default: derived from the global seed).
    #[arg(long)]
    pub corrupt_seed: Option<u64>,
    /// Examples per output shard.
    #[arg(long)]
    pub shard_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Args)]
pub struct NliLoadArgs {
    /// A MedNLI file or a directory of split files.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Split for a single file whose name does not say.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NliTranslateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct RefineServeArgs {
    /// Machine-translated examples to enqueue (already queued ones are kept).
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Store journal file.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Abbreviation lexicon TSV.
    #[arg(long)]
    pub abbrev_lexicon: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<SocketAddr>,
    #[arg(long)]
    pub lease_minutes: Option<i64>,
    /// Enqueue and exit without serving.
    #[arg(long)]
    pub enqueue_only: bool,
    /// Accept every rule suggestion as this annotator, then exit.
    #[arg(long, value_name = "ANNOTATOR")]
    pub auto_accept: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    Tsv,
    Both,
}

#[derive(Debug, Args)]
pub struct NliExportArgs {
    /// Examples JSON lines.
    #[arg(long = "in", conflicts_with = "store", required_unless_present = "store")]
    pub input: Option<PathBuf>,
    /// Refinement store journal.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub format: FormatArg,
    /// Export even when not every example is refined.
    #[arg(long)]
    pub allow_mixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, ValueEnum)]
pub enum MetricArg {
    Bleu,
    #[value(name = "rouge_l")]
    RougeL,
    #[value(name = "macro_f1")]
    MacroF1,
    Accuracy,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, required = true, num_args = 1..)]
    pub metric: Vec<MetricArg>,
    /// Hypotheses / predictions, one per line.
    #[arg(long, requires = "reference", conflicts_with = "tsv")]
    pub hyp: Option<PathBuf>,
    /// References / gold labels, one per line.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// TSV of hypothesis<TAB>reference<TAB>domain.
    #[arg(long, required_unless_present = "hyp")]
    pub tsv: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Label set for macro-F1, comma separated (default: labels seen in the references).
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
    /// Leave classes absent from both sides out of macro-F1.
    #[arg(long)]
    pub exclude_absent_classes: bool,
    /// Also write the reports here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print an aligned table instead of JSON.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files written by `eval`.
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Partial,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub(crate) fn data<E: fmt::Display>(context: impl fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data(format!("{context}: {e}"))
}

/// Settings shared by every subcommand after config and flags are merged.
pub struct Context {
    pub config: PipelineConfig,
    pub seed: u64,
    pub jobs: usize,
    pub dry_run: bool,
}

impl Context {
    pub fn from_global(g: &GlobalArgs) -> Result<Self, CliError> {
        let config = match &g.config {
            Some(p) => PipelineConfig::load(p).map_err(CliError::Usage)?,
            None => PipelineConfig::default(),
        };
        let seed = g.seed.or(config.seed).unwrap_or(seeds::DEFAULT_GLOBAL_SEED);
        let jobs = g
            .jobs
            .or(config.jobs)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        Ok(Context {
            config,
            seed,
            jobs,
            dry_run: g.dry_run,
        })
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seeds::stage_seed(self.seed, stage)
    }
}

/// What a command is about to do; printed by `--dry-run`.
#[derive(Debug, Serialize)]
pub struct Plan {
    pub command: &'static str,
    pub global_seed: u64,
    pub jobs: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub settings: serde_json::Value,
}

pub fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    let ctx = Context::from_global(&cli.global)?;
    match cli.command {
        Command::Ingest(a) => commands::corpus::ingest(&ctx, a),
        Command::Filter(a) => commands::corpus::filter(&ctx, a),
        Command::Translate(a) => commands::corpus::translate(&ctx, a),
        Command::SelftrainMix(a) => commands::corpus::selftrain_mix(&ctx, a),
        Command::Corrupt(a) => commands::corpus::corrupt(&ctx, a),
        Command::NliLoad(a) => commands::nli::load(&ctx, a),
        Command::NliTranslate(a) => commands::nli::translate(&ctx, a),
        Command::NliRefineServe(a) => commands::nli::refine_serve(&ctx, a),
        Command::NliExport(a) => commands::nli::export(&ctx, a),
        Command::Eval(a) => commands::eval::eval(&ctx, a),
        Command::Report(a) => commands::eval::report(&ctx, a),
    }
}

/// Parses `args` (including the program name) and runs. Returns the
/// process exit code; clap's own help/version output counts as success.
pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::Partial) => 3,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
