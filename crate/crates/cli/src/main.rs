mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use promptprism::perturb::{DelimiterPosition, ReorderPosition};
use promptprism::Strategy;

use crate::config::Format;

#[derive(Parser, Debug)]
#[command(
    name = "promptprism",
    about = "Annotate, profile, perturb and evaluate prompts with a component taxonomy",
    disable_version_flag = true,
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    /// Print the version with registry and template checksums.
    #[arg(short = 'V', long)]
    pub version: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for per-record fan-out.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: Option<u16>,

    /// Skip malformed records with a warning instead of aborting.
    #[arg(long, global = true, conflicts_with = "strict")]
    pub lenient: bool,

    /// Abort on the first malformed record (overrides a lenient config).
    #[arg(long, global = true)]
    pub strict: bool,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Extra taxonomy tags (TOML or JSON map of tag to description).
    #[arg(long, global = true, value_name = "FILE")]
    pub overlay: Option<PathBuf>,

    /// Backend name from the config file, or `mock` with --mock-*.
    #[arg(long, global = true)]
    pub backend: Option<String>,

    /// Register a `mock` backend answering from a digest-to-response JSON map.
    #[arg(long, global = true, value_name = "FILE", conflicts_with = "mock_transcript")]
    pub mock_fixture: Option<PathBuf>,

    /// Register a `mock` backend replaying a transcript.
    #[arg(long, global = true, value_name = "FILE")]
    pub mock_transcript: Option<PathBuf>,

    /// Append every backend call to this JSON Lines transcript.
    #[arg(long, global = true, value_name = "FILE")]
    pub transcript: Option<PathBuf>,

    /// Maximum number of backend calls.
    #[arg(long, global = true, value_name = "N")]
    pub call_cap: Option<u64>,

    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Tag raw prompts with taxonomy components through a chat backend.
    Annotate(AnnotateArgs),
    /// Check annotated prompts; exits 1 if any record is malformed.
    Validate(ValidateArgs),
    /// Profile a prompt corpus along structural, semantic, syntactic and metadata axes.
    Profile(ProfileArgs),
    /// Reorder components or change delimiters.
    Perturb {
        #[command(subcommand)]
        op: PerturbOp,
    },
    /// Compare default, chain-of-thought and taxonomy-refined instructions on a task.
    Refine(RefineArgs),
    /// Score candidates against references with ROUGE-L.
    EvalRouge(EvalRougeArgs),
    /// Score ordering and delimiter variants of a prompt.
    EvalSensitivity(SensitivityArgs),
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    /// Also classify each record's task type into a `task_type` field.
    #[arg(long)]
    pub classify: bool,
    /// Write a CSV sheet for human review of the tags.
    #[arg(long, value_name = "FILE")]
    pub review: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum PerturbOp {
    /// Move every component of a category to the first, middle or last slot.
    Reorder {
        #[arg(long)]
        component: String,
        #[arg(long)]
        position: ReorderPosition,
        /// Homogenize delimiters afterwards (escapes: \n \t \\ \s).
        #[arg(long, value_name = "DELIM")]
        normalize_delimiters: Option<String>,
        #[command(flatten)]
        io: PerturbIo,
    },
    /// Replace delimiters between components (escapes: \n \t \\ \s).
    Delimiter {
        #[arg(long, allow_hyphen_values = true)]
        new: String,
        #[arg(long)]
        position: DelimiterPosition,
        #[command(flatten)]
        io: PerturbIo,
    },
}

#[derive(Args, Debug)]
pub struct PerturbIo {
    /// A prompt JSON file, or JSON Lines when the name ends in `.jsonl`.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub strip_tags: bool,
}

#[derive(Args, Debug)]
pub struct ReportOut {
    /// JSON report path (standard output when absent).
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Also write the markdown table here.
    #[arg(long, value_name = "FILE")]
    pub markdown: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    /// Task bundle JSON.
    #[arg(long, value_name = "FILE")]
    pub task: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// Refined prompts sampled (and repetitions per strategy).
    #[arg(long)]
    pub variants: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub refine_temperature: Option<f64>,
    #[arg(long)]
    pub max_output_tokens: Option<u32>,
    #[command(flatten)]
    pub out: ReportOut,
}

#[derive(Args, Debug)]
pub struct EvalRougeArgs {
    /// JSON Lines of {"id"?, "candidate", "references": [...]} (or "reference").
    #[arg(long, value_name = "FILE", conflicts_with_all = ["reference", "candidate"])]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "candidate")]
    pub reference: Vec<String>,
    #[arg(long, requires = "reference")]
    pub candidate: Option<String>,
    #[arg(long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Ordering,
    Delimiter,
}

#[derive(Args, Debug)]
pub struct SensitivityArgs {
    /// Baseline prompt JSON; its target message needs an `{input}` placeholder.
    #[arg(long, value_name = "FILE")]
    pub prompt: PathBuf,
    /// Task bundle JSON supplying instances and gold outputs.
    #[arg(long, value_name = "FILE")]
    pub task: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["ordering"])]
    pub suite: Vec<Suite>,
    /// Categories to reorder (default: every category in the target message).
    #[arg(long, value_delimiter = ',')]
    pub components: Vec<String>,
    /// JSON list of {"label", "spec"} used instead of the built-in suites.
    #[arg(long, value_name = "FILE")]
    pub variants: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Send prompts with taxonomy tags left in.
    #[arg(long)]
    pub keep_tags: bool,
    #[arg(long)]
    pub max_output_tokens: Option<u32>,
    #[command(flatten)]
    pub out: ReportOut,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or arguments: exit 2 with the synopsis.
    Usage(anyhow::Error),
    /// Malformed input or a failed operation: exit 1.
    Failed(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Failed(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.into())
    }
}

pub trait UsageExt<T> {
    fn usage(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Usage(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.version {
        return match commands::print_version(&cli.global) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => report(e),
        };
    }
    let Some(command) = cli.command else {
        let _ = Cli::command().print_help();
        return ExitCode::from(2);
    };
    match commands::run(&cli.global, command) {
        Ok(code) => code,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    match e {
        CliError::Usage(e) => {
            eprintln!("error: {e:#}\n");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        CliError::Failed(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
