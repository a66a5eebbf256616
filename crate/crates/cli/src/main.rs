//! `nluadv`: ingest or synthesize data, train taggers, generate paraphrases,
//! build and annotate adversarial sets, evaluate and report.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nluadv_core::Execution;

mod commands;
mod error;

use error::{CliError, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "nluadv", version, about = "Paraphrase robustness toolkit for joint intent and slot models")]
struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dataset and write it to a data directory.
    Ingest(IngestArgs),
    /// Generate a synthetic corpus with a held-out perturbation set.
    Synth(SynthArgs),
    /// Train a tagger (baseline, augmented or with logit pairing).
    Train(TrainArgs),
    /// Generate paraphrases into a cache file.
    Paraphrase(ParaphraseArgs),
    /// Self-tag cached paraphrases of the training split.
    Augment(AugmentArgs),
    /// Adversarial test-set construction.
    Advset {
        #[command(subcommand)]
        command: AdvsetCommand,
    },
    /// Annotation service.
    Annotate {
        #[command(subcommand)]
        command: AnnotateCommand,
    },
    /// Evaluate one model (or an ensemble) on clean and adversarial sets.
    Eval(EvalArgs),
    /// Merge evaluation rows into a report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InputFormat {
    Canonical,
    Columns,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum, default_value = "canonical")]
    format: InputFormat,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Grammar file; the bundled weather/alarm grammar when omitted.
    #[arg(long)]
    grammar: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    dev: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Data directory with train.tsv and dev.tsv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Experiment config whose tagger, pairing and augmentation settings
    /// are used as defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `none`, or comma-separated source tags (`bt-es`, `seq2seq`,
    /// `rulebased`, or full descriptors like `bt:mt:es`).
    #[arg(long, default_value = "none")]
    augment: String,
    /// Output of `augment`; required with augmentation or ALP.
    #[arg(long)]
    augmented: Option<PathBuf>,
    /// `none`, `clean`, `alp` or `clean+alp`.
    #[arg(long, default_value = "none")]
    pairing: String,
    #[arg(long)]
    lambda_sf: Option<f64>,
    #[arg(long)]
    lambda_a: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    embedding: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the snapshot left by an interrupted run.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs in this invocation, keeping the snapshot.
    #[arg(long)]
    pause_after: Option<usize>,
}

#[derive(Debug, Args)]
struct ParaphraseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    /// `bt:<adapter>:<lang>`, `seq2seq` or `rulebased`.
    #[arg(long)]
    source: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Cache file; appended to, originals already cached are skipped.
    #[arg(long)]
    out: PathBuf,
    /// Adapter command line for back-translation; `{lang}` is replaced by
    /// the source language. Overridden by NLUADV_ADAPTER_CMD.
    #[arg(long, default_value = "nluadv-rule-adapter")]
    adapter_cmd: String,
    /// Rewrite rules for `rulebased`; the bundled grammar's rules by default.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Autoencoder checkpoint; trained on the split and saved when missing.
    #[arg(long)]
    autoencoder: Option<PathBuf>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    ae_epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model used for self-training.
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "cache", required = true)]
    caches: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    weight: f32,
}

#[derive(Debug, Subcommand)]
enum AdvsetCommand {
    /// Flip-filter cached paraphrases of a split into the candidate log.
    Build(AdvBuildArgs),
    /// Write final valid candidates in the canonical format with a source column.
    Export(AdvExportArgs),
}

#[derive(Debug, Args)]
struct AdvBuildArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "cache", required = true)]
    caches: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Event log; created when missing, extended otherwise.
    #[arg(long)]
    log: PathBuf,
    /// Do not show annotators the original sentence.
    #[arg(long)]
    hide_original: bool,
}

#[derive(Debug, Args)]
struct AdvExportArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum AnnotateCommand {
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "NLUADV_LOG")]
    log: PathBuf,
    #[arg(long, env = "NLUADV_TOKENS")]
    tokens: PathBuf,
    #[arg(long, env = "NLUADV_HOST", default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "NLUADV_PORT", default_value_t = 8080)]
    port: u16,
    /// Directory with the UI bundle.
    #[arg(long = "static", env = "NLUADV_STATIC")]
    static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Model checkpoint; repeat for an ensemble.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Row name in the report.
    #[arg(long)]
    name: String,
    #[arg(long)]
    clean: PathBuf,
    /// Adversarial set; split by its source column when present.
    #[arg(long = "adv", required = true)]
    adversarial: Vec<PathBuf>,
    /// Line-delimited output row.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Merged line-delimited report.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exec(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ex = exec(&cli);
    match cli.command {
        Command::Ingest(a) => commands::ingest(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a, ex),
        Command::Paraphrase(a) => commands::paraphrase(&a, ex),
        Command::Augment(a) => commands::augment(&a, ex),
        Command::Advset { command: AdvsetCommand::Build(a) } => commands::advset_build(&a, ex),
        Command::Advset { command: AdvsetCommand::Export(a) } => commands::advset_export(&a),
        Command::Annotate { command: AnnotateCommand::Serve(a) } => commands::serve(&a),
        Command::Eval(a) => commands::eval(&a, ex),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE as u8) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
