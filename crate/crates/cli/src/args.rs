use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use collabvd::collab::HintMode;
use collabvd::corpus::{LabelPolarity, Part};
use collabvd::dialogue::PromptVariant;
use collabvd::eval::Scoring;

#[derive(Debug, Parser)]
#[command(
    name = "collabvd",
    version,
    about = "Detector + LLM collaborative vulnerability detection",
    long_about = "Runs the collaborative assessment pipeline: split a labeled corpus, \
                  assess every sample with a detector and an LLM (rechecking disagreements), \
                  export enriched records for the validation model, train it through an \
                  external trainer, and evaluate or ablate the results.\n\n\
                  Settings come from an optional TOML file (--config); flags override it. \
                  The LLM bearer token is read from the environment variable named by \
                  llm.api_key_env (LLM_API_KEY by default)."
)]
pub struct Cli {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a dataset and write its stratified train/valid/test split manifest.
    Ingest(IngestArgs),
    /// Run both assessment phases over all three parts into the store.
    Assess(AssessArgs),
    /// Export enriched train/valid/test files from a complete store.
    Synthesize(SynthesizeArgs),
    /// Fine-tune the validation model by invoking the external trainer.
    Train(TrainArgs),
    /// Assess new code end to end and report the validator's verdict.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Venn overlap of 2 or 3 models' detections and false negatives.
    Compare(CompareArgs),
    /// Run an ablation matrix and tabulate metrics per configuration.
    Ablate(AblateArgs),
    /// Print the effective configuration and its digest.
    ShowConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Polarity {
    /// target 1 means vulnerable.
    OneIsVulnerable,
    /// target 1 means clean.
    OneIsClean,
}

impl From<Polarity> for LabelPolarity {
    fn from(p: Polarity) -> Self {
        match p {
            Polarity::OneIsVulnerable => LabelPolarity::OneIsVulnerable,
            Polarity::OneIsClean => LabelPolarity::OneIsClean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartArg {
    Train,
    Valid,
    Test,
}

impl From<PartArg> for Part {
    fn from(p: PartArg) -> Self {
        match p {
            PartArg::Train => Part::Train,
            PartArg::Valid => Part::Valid,
            PartArg::Test => Part::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StoreSource {
    /// The detector's Phase I verdict.
    Detector,
    /// The LLM's Phase I verdict (Unknown scored as clean).
    LlmInitial,
    /// The LLM's verdict after refinement (Unknown scored as clean).
    LlmFinal,
}

pub fn parse_hint_mode(s: &str) -> Result<HintMode, String> {
    s.parse()
}

pub fn parse_variant(s: &str) -> Result<PromptVariant, String> {
    s.parse()
}

pub fn parse_scoring(s: &str) -> Result<Scoring, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file: one {"idx","func","target"} object per line.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,

    /// Meaning of target = 1 in the dataset file.
    #[arg(long, value_enum)]
    pub polarity: Option<Polarity>,

    /// Split manifest written by `ingest`.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Detector backend: http(s)://..., script:<file>, stat:tpr=..,fpr=..[,seed=..], keyword:<text> or offline.
    #[arg(long, value_name = "SPEC")]
    pub detector: Option<String>,

    /// LLM backend: http(s)://..., script:<file> or offline.
    #[arg(long, value_name = "SPEC")]
    pub llm: Option<String>,

    /// LLM model name sent with each request.
    #[arg(long)]
    pub model: Option<String>,

    /// LLM sampling temperature.
    #[arg(long)]
    pub temperature: Option<f64>,

    /// Total attempts per backend request, including the first.
    #[arg(long, value_name = "N")]
    pub max_attempts: Option<u32>,
}

#[derive(Debug, Args)]
pub struct DialogueArgs {
    /// Recheck hint: detector, none, always_yes or always_no.
    #[arg(long, value_parser = parse_hint_mode, value_name = "MODE")]
    pub hint_mode: Option<HintMode>,

    /// Phase I prompt: plain, cot, fewshot or fewshot(K_POS,K_NEG).
    #[arg(long, value_parser = parse_variant, value_name = "VARIANT")]
    pub variant: Option<PromptVariant>,

    /// Prompt template file (the built-in template when omitted).
    #[arg(long, value_name = "FILE")]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Train/valid/test ratios, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 3, value_name = "R,R,R")]
    pub ratios: Option<Vec<f64>>,

    /// Shuffle seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AssessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub backends: BackendArgs,
    #[command(flatten)]
    pub dialogue: DialogueArgs,

    /// Assessment store (created or resumed).
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,

    /// Samples in flight at once.
    #[arg(long, value_name = "N")]
    pub concurrency: Option<usize>,

    /// Request rate limit per second across workers.
    #[arg(long, value_name = "PER_SEC")]
    pub rate_limit: Option<f64>,

    /// Abort when failed samples exceed this fraction of those attempted.
    #[arg(long, value_name = "FRACTION")]
    pub failure_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Assessment store produced by `assess`.
    #[arg(long, value_name = "FILE")]
    pub store: Option<PathBuf>,

    /// Directory for train.jsonl, valid.jsonl and test.jsonl.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    /// Keep only the description in the marker line, without YES/NO.
    #[arg(long)]
    pub drop_verdict: bool,

    /// Prompt template file whose marker strings are used.
    #[arg(long, value_name = "FILE")]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding the exported train/valid files.
    #[arg(long, value_name = "DIR")]
    pub enriched_dir: Option<PathBuf>,

    /// Checkpoint output directory.
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,

    /// Pre-trained encoder to fine-tune.
    #[arg(long)]
    pub base_model: Option<String>,

    #[arg(long)]
    pub epochs: Option<u32>,

    #[arg(long)]
    pub learning_rate: Option<f64>,

    #[arg(long)]
    pub batch_size: Option<u32>,

    /// Maximum tokenized sequence length.
    #[arg(long)]
    pub max_length: Option<u32>,

    /// Tokens reserved for the marker line when truncating.
    #[arg(long)]
    pub tail_budget: Option<u32>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Print the trainer command instead of running it.
    #[arg(long)]
    pub dry_run: bool,

    /// Trainer executable and leading arguments (overrides train.command).
    #[arg(last = true, value_name = "TRAINER")]
    pub trainer: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Source file to assess.
    #[arg(
        long,
        value_name = "FILE",
        conflicts_with = "batch",
        required_unless_present = "batch"
    )]
    pub code: Option<PathBuf>,

    /// Batch of {"idx","func"} lines to assess.
    #[arg(long, value_name = "FILE")]
    pub batch: Option<PathBuf>,

    /// Id reported for --code.
    #[arg(long, default_value_t = 0)]
    pub id: u64,

    #[command(flatten)]
    pub backends: BackendArgs,

    /// Validator backend (same protocol as the detector).
    #[arg(long, value_name = "SPEC")]
    pub validator: Option<String>,

    #[command(flatten)]
    pub dialogue: DialogueArgs,

    /// Training data for few-shot exemplars.
    #[command(flatten)]
    pub data: DataArgs,

    /// Output file (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    /// Fail (exit 1) when accuracy is below this value.
    #[arg(long)]
    pub min_accuracy: Option<f64>,
    /// Fail (exit 1) when precision is below this value.
    #[arg(long)]
    pub min_precision: Option<f64>,
    /// Fail (exit 1) when recall is below this value.
    #[arg(long)]
    pub min_recall: Option<f64>,
    /// Fail (exit 1) when F1 is below this value.
    #[arg(long)]
    pub min_f1: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ground truth in dataset format; defaults to the targets of --enriched.
    #[arg(long, value_name = "FILE")]
    pub truths: Option<PathBuf>,

    /// Meaning of target = 1 in the truths file.
    #[arg(long, value_enum)]
    pub polarity: Option<Polarity>,

    /// Predictions: {"idx","verdict"} or {"idx","target"} lines.
    #[arg(long, value_name = "FILE", group = "source_group")]
    pub predictions: Option<PathBuf>,

    /// Assessment store to score directly.
    #[arg(long, value_name = "FILE", group = "source_group")]
    pub store: Option<PathBuf>,

    /// Which store verdict to score.
    #[arg(long, value_enum, default_value = "llm-final", requires = "store")]
    pub source: StoreSource,

    /// Enriched file to send to the validator.
    #[arg(long, value_name = "FILE", group = "source_group")]
    pub enriched: Option<PathBuf>,

    /// Validator backend for --enriched.
    #[arg(long, value_name = "SPEC")]
    pub validator: Option<String>,

    /// Split manifest restricting evaluation to one part.
    #[arg(long, value_name = "FILE", requires = "part")]
    pub manifest: Option<PathBuf>,

    /// Part to evaluate (with --manifest).
    #[arg(long, value_enum, requires = "manifest")]
    pub part: Option<PartArg>,

    #[command(flatten)]
    pub thresholds: ThresholdArgs,

    /// Write the report as JSON.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Ground truth in dataset format.
    #[arg(long, value_name = "FILE")]
    pub truths: PathBuf,

    #[arg(long, value_enum)]
    pub polarity: Option<Polarity>,

    /// NAME=FILE prediction files; give 2 or 3.
    #[arg(long = "model", value_name = "NAME=FILE", required = true)]
    pub models: Vec<String>,

    /// Split manifest restricting the comparison to one part.
    #[arg(long, value_name = "FILE", requires = "part")]
    pub manifest: Option<PathBuf>,

    #[arg(long, value_enum, requires = "manifest")]
    pub part: Option<PartArg>,

    /// Write the report as JSON.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub backends: BackendArgs,

    /// Validator backend for validator-scored rows.
    #[arg(long, value_name = "SPEC")]
    pub validator: Option<String>,

    /// Hint modes to compare, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_hint_mode, value_name = "MODES")]
    pub modes: Vec<HintMode>,

    /// Prompt variants to compare, separated by ';'.
    #[arg(long, value_delimiter = ';', value_parser = parse_variant, value_name = "VARIANTS")]
    pub variants: Vec<PromptVariant>,

    /// Verdict scored: detector, llm_initial, llm_final or validator.
    #[arg(long, value_parser = parse_scoring)]
    pub scoring: Option<Scoring>,

    /// TOML matrix with [[row]] entries and named backends; replaces --modes/--variants.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["modes", "variants"])]
    pub rows: Option<PathBuf>,

    /// Part the rows are scored on.
    #[arg(long, value_enum, default_value = "test")]
    pub part: PartArg,

    /// Prompt template file.
    #[arg(long, value_name = "FILE")]
    pub template: Option<PathBuf>,

    /// Directory for the report files and resumable stores.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,

    #[arg(long, value_name = "N")]
    pub concurrency: Option<usize>,
}
