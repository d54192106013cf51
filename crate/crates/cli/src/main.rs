use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use memnav_cli::{
    cmd_build_memory, cmd_run, cmd_score, BackendChoice, BuildConfig, RunConfig, ScoreConfig,
};
use memnav_core::ragp::RuleMode;

#[derive(Parser)]
#[command(
    name = "memnav",
    version,
    about = "Memory-augmented navigation on viewpoint graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Oracle,
    Greedy,
    Chat,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleModeArg {
    Constraint,
    Context,
    None,
}

impl From<RuleModeArg> for RuleMode {
    fn from(arg: RuleModeArg) -> Self {
        match arg {
            RuleModeArg::Constraint => RuleMode::Constraint,
            RuleModeArg::Context => RuleMode::PlainContext,
            RuleModeArg::None => RuleMode::None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a memory file for an environment.
    BuildMemory(BuildArgs),
    /// Run episodes against a memory and report NE / SR / OSR / SPL.
    Run(Box<RunArgs>),
    /// Recompute a report from recorded traces.
    Score(ScoreArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// Environment JSON file.
    #[arg(long)]
    env: PathBuf,
    /// Output memory file.
    #[arg(long)]
    memory: PathBuf,
    /// Embedding dimension.
    #[arg(long, default_value_t = 512)]
    dimension: usize,
    /// Seed every unit with a fixed scene description instead of learned
    /// experiences.
    #[arg(long = "scene-desc")]
    scene_desc: bool,
    /// Embedding service URL; omitted means the built-in hash embedder.
    #[arg(long = "embed-endpoint")]
    embed_endpoint: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    episodes: PathBuf,
    /// Memory file to load (and to persist after a continual run).
    #[arg(long)]
    memory: Option<PathBuf>,
    /// Start from a fresh experience-free memory instead of a file.
    #[arg(long = "empty-memory")]
    empty_memory: bool,
    /// Embedding dimension when no memory file fixes one.
    #[arg(long, default_value_t = 512)]
    dimension: usize,
    #[arg(long, value_enum, default_value = "greedy")]
    backend: BackendArg,
    #[arg(long = "rule-mode", value_enum, default_value = "constraint")]
    rule_mode: RuleModeArg,
    /// Retrieval similarity threshold for rule injection.
    #[arg(long, default_value_t = 0.55)]
    tau: f64,
    /// Success radius in meters.
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    #[arg(long = "max-steps", default_value_t = 15)]
    max_steps: usize,
    #[arg(long = "parse-retries", default_value_t = 2)]
    parse_retries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reflect after each episode and persist the updated memory at the end.
    #[arg(long)]
    continual: bool,
    /// Scene-description ablation: no reflection commits.
    #[arg(long = "scene-desc")]
    scene_desc: bool,
    /// Write the full report JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write one NDJSON trace file per episode here.
    #[arg(long = "traces-dir")]
    traces_dir: Option<PathBuf>,
    /// Write one reflection record per episode here.
    #[arg(long = "reflection-log")]
    reflection_log: Option<PathBuf>,
    /// Attention projection matrix file (defaults to identity).
    #[arg(long = "fusion-weights")]
    fusion_weights: Option<PathBuf>,
    /// Greedy backend arrival threshold.
    #[arg(long = "stop-threshold", default_value_t = 0.6)]
    stop_threshold: f64,
    /// Chat backend endpoint URL.
    #[arg(long = "chat-endpoint")]
    chat_endpoint: Option<String>,
    /// Chat backend model name.
    #[arg(long = "chat-model", default_value = "gpt-4o")]
    chat_model: String,
    #[arg(long = "embed-endpoint")]
    embed_endpoint: Option<String>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Trace file or directory of .ndjson files.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    env: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{err}");
                    return ExitCode::SUCCESS;
                }
                _ => 1,
            };
            eprint!("{err}");
            return ExitCode::from(code);
        }
    };

    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::BuildMemory(args) => {
            cmd_build_memory(&BuildConfig {
                env_path: args.env,
                memory_path: args.memory.clone(),
                dimension: args.dimension,
                scene_description_mode: args.scene_desc,
                embed_endpoint: args.embed_endpoint,
            })?;
            println!("memory written to {}", args.memory.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(args) => {
            let backend = match args.backend {
                BackendArg::Oracle => BackendChoice::Oracle,
                BackendArg::Greedy => BackendChoice::Greedy {
                    stop_threshold: args.stop_threshold,
                },
                BackendArg::Chat => BackendChoice::Chat {
                    endpoint: args
                        .chat_endpoint
                        .ok_or_else(|| anyhow::anyhow!("--chat-endpoint is required with --backend chat"))?,
                    model: args.chat_model,
                },
            };
            let config = RunConfig {
                env_path: args.env,
                episodes_path: args.episodes,
                memory_path: args.memory,
                empty_memory: args.empty_memory,
                dimension: args.dimension,
                backend,
                rule_mode: args.rule_mode.into(),
                tau: args.tau,
                radius: args.radius,
                max_steps: args.max_steps,
                parse_retries: args.parse_retries,
                seed: args.seed,
                continual: args.continual,
                scene_description_mode: args.scene_desc,
                report_path: args.report,
                traces_dir: args.traces_dir,
                reflection_log: args.reflection_log,
                fusion_weights_path: args.fusion_weights,
                embed_endpoint: args.embed_endpoint,
            };
            let report = cmd_run(&config)?;
            print!("{}", report.render());
            if report.rows.iter().any(|r| r.error.is_some()) {
                Ok(ExitCode::from(2))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Score(args) => {
            let report = cmd_score(&ScoreConfig {
                traces_path: args.traces,
                env_path: args.env,
                radius: args.radius,
                report_path: args.report,
            })?;
            print!("{}", report.render());
            Ok(ExitCode::SUCCESS)
        }
    }
}
