//! The three commands: build-memory, run, score.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::Serialize;

use memnav_core::embedding::{
    Embedder, FusionWeights, HashEmbedder, RemoteEmbedder, RemoteEmbedderConfig,
    DEFAULT_DIMENSION,
};
use memnav_core::env::{
    load_episodes, score_episode, EnvironmentGraph, Episode, DEFAULT_SUCCESS_RADIUS,
};
use memnav_core::memory::ExperienceMemory;
use memnav_core::policy::{
    ChatBackend, ChatConfig, DecisionBackend, GreedyBackend, OracleScript, OracleScriptBackend,
    DEFAULT_STOP_THRESHOLD,
};
use memnav_core::ragp::{
    run_episode, EpisodeResult, EpisodeRunConfig, Plan, RuleMode, StepKind, StepTrace,
    TrajectoryStep, DEFAULT_MAX_STEPS, DEFAULT_PARSE_RETRIES, DEFAULT_RETRIEVAL_THRESHOLD,
};
use memnav_core::reflection::{classify, reflect_and_commit, ReflectionError};

use crate::report::{EpisodeRow, RunReport};

/// Environment variable holding the chat backend's bearer token.
pub const CHAT_TOKEN_ENV: &str = "MEMNAV_CHAT_TOKEN";
/// Environment variable holding the embedding service's bearer token.
pub const EMBED_TOKEN_ENV: &str = "MEMNAV_EMBED_TOKEN";

/// Checkpoint cadence for continual runs.
const CHECKPOINT_EVERY: usize = 10;

#[derive(Debug, Clone)]
pub enum BackendChoice {
    /// Follows each episode's reference path.
    Oracle,
    Greedy {
        stop_threshold: f64,
    },
    Chat {
        endpoint: String,
        model: String,
    },
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub env_path: PathBuf,
    pub memory_path: PathBuf,
    pub dimension: usize,
    pub scene_description_mode: bool,
    pub embed_endpoint: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub env_path: PathBuf,
    pub episodes_path: PathBuf,
    /// Memory file to load, and to persist to after a continual run.
    pub memory_path: Option<PathBuf>,
    /// Start from a freshly built, experience-free memory instead of a file.
    pub empty_memory: bool,
    /// Embedding dimension for `empty_memory`; otherwise the file decides.
    pub dimension: usize,
    pub backend: BackendChoice,
    pub rule_mode: RuleMode,
    pub tau: f64,
    pub radius: f64,
    pub max_steps: usize,
    pub parse_retries: usize,
    pub seed: u64,
    pub continual: bool,
    pub scene_description_mode: bool,
    pub report_path: Option<PathBuf>,
    pub traces_dir: Option<PathBuf>,
    pub reflection_log: Option<PathBuf>,
    pub fusion_weights_path: Option<PathBuf>,
    pub embed_endpoint: Option<String>,
}

impl RunConfig {
    pub fn new(env_path: impl Into<PathBuf>, episodes_path: impl Into<PathBuf>) -> Self {
        RunConfig {
            env_path: env_path.into(),
            episodes_path: episodes_path.into(),
            memory_path: None,
            empty_memory: false,
            dimension: DEFAULT_DIMENSION,
            backend: BackendChoice::Greedy {
                stop_threshold: DEFAULT_STOP_THRESHOLD,
            },
            rule_mode: RuleMode::Constraint,
            tau: DEFAULT_RETRIEVAL_THRESHOLD,
            radius: DEFAULT_SUCCESS_RADIUS,
            max_steps: DEFAULT_MAX_STEPS,
            parse_retries: DEFAULT_PARSE_RETRIES,
            seed: 0,
            continual: false,
            scene_description_mode: false,
            report_path: None,
            traces_dir: None,
            reflection_log: None,
            fusion_weights_path: None,
            embed_endpoint: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScoreConfig {
    pub traces_path: PathBuf,
    pub env_path: PathBuf,
    pub radius: f64,
    pub report_path: Option<PathBuf>,
}

fn make_embedder(
    dimension: usize,
    endpoint: &Option<String>,
) -> anyhow::Result<Arc<dyn Embedder>> {
    match endpoint {
        Some(url) => {
            let mut config = RemoteEmbedderConfig::new(url.clone(), dimension);
            config.auth_token = std::env::var(EMBED_TOKEN_ENV).ok();
            Ok(Arc::new(RemoteEmbedder::new(config)?))
        }
        None => Ok(Arc::new(HashEmbedder::new(dimension))),
    }
}

/// Fixed scene text for the scene-description ablation.
pub fn scene_description(landmarks: &[String]) -> String {
    if landmarks.is_empty() {
        "This viewpoint has no salient landmarks.".to_string()
    } else {
        format!("This viewpoint contains: {}.", landmarks.join(", "))
    }
}

/// Builds a memory file for an environment: one unit per viewpoint with its
/// hybrid embedding. With `scene_description_mode`, every unit additionally
/// gets one fixed scene-description entry.
pub fn cmd_build_memory(cfg: &BuildConfig) -> anyhow::Result<()> {
    let graph = EnvironmentGraph::load(&cfg.env_path)?;
    let embedder = make_embedder(cfg.dimension, &cfg.embed_endpoint)?;
    let mut memory = ExperienceMemory::build(&graph, embedder.as_ref())?;
    if cfg.scene_description_mode {
        let units: Vec<(String, Vec<String>)> = memory
            .units()
            .iter()
            .map(|u| (u.viewpoint_id.clone(), u.landmarks.clone()))
            .collect();
        for (viewpoint_id, landmarks) in units {
            memory.insert_scene_description(
                &viewpoint_id,
                scene_description(&landmarks),
                embedder.as_ref(),
            )?;
        }
    }
    memory.save(&cfg.memory_path)?;
    Ok(())
}

#[derive(Serialize)]
struct ReflectionRecord {
    episode_id: String,
    /// "success" or "failure"; absent when unclassifiable.
    verdict: Option<&'static str>,
    failure_type: Option<String>,
    first_wrong_step: Option<usize>,
    budget_exhausted: bool,
    committed: bool,
    insert_outcomes: Vec<(String, String)>,
    note: Option<String>,
}

enum Runner {
    PerEpisodeOracle,
    Shared(Box<dyn DecisionBackend>),
}

/// Runs every episode in order. In continual mode each episode's reflection
/// is committed to memory before the next episode starts, with a checkpoint
/// every ten episodes and a final save; otherwise memory is a read-only
/// snapshot. Backend and transport failures are recorded per episode and
/// the run continues.
pub fn cmd_run(cfg: &RunConfig) -> anyhow::Result<RunReport> {
    let graph = EnvironmentGraph::load(&cfg.env_path)?;
    let episodes = load_episodes(&cfg.episodes_path, &graph)?;

    let (mut memory, embedder): (ExperienceMemory, Arc<dyn Embedder>) = match &cfg.memory_path {
        Some(path) if !cfg.empty_memory => {
            let memory = ExperienceMemory::load(path)?;
            let embedder = make_embedder(memory.dimension(), &cfg.embed_endpoint)?;
            (memory, embedder)
        }
        _ => {
            if !cfg.empty_memory && cfg.memory_path.is_none() {
                bail!("either --memory or --empty-memory is required");
            }
            let embedder = make_embedder(cfg.dimension, &cfg.embed_endpoint)?;
            let memory = ExperienceMemory::build(&graph, embedder.as_ref())?;
            (memory, embedder)
        }
    };

    let fusion_weights = cfg
        .fusion_weights_path
        .as_ref()
        .map(|p| FusionWeights::load(p))
        .transpose()?;
    if let Some(w) = &fusion_weights {
        if w.dimension() != memory.dimension() {
            bail!(
                "fusion weights dimension {} does not match memory dimension {}",
                w.dimension(),
                memory.dimension()
            );
        }
    }

    let runner = match &cfg.backend {
        BackendChoice::Oracle => Runner::PerEpisodeOracle,
        BackendChoice::Greedy { stop_threshold } => Runner::Shared(Box::new(GreedyBackend::new(
            embedder.clone(),
            *stop_threshold,
        ))),
        BackendChoice::Chat { endpoint, model } => {
            let mut chat = ChatConfig::new(endpoint.clone(), model.clone());
            chat.auth_token = std::env::var(CHAT_TOKEN_ENV).ok();
            Runner::Shared(Box::new(ChatBackend::new(chat)?))
        }
    };

    let run_cfg = EpisodeRunConfig {
        max_steps: cfg.max_steps,
        retrieval_threshold: cfg.tau,
        rule_mode: cfg.rule_mode,
        radius: cfg.radius,
        parse_retries: cfg.parse_retries,
        seed: cfg.seed,
        fusion_weights,
    };

    if let Some(dir) = &cfg.traces_dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating traces directory {}", dir.display()))?;
    }
    let mut reflection_log = cfg
        .reflection_log
        .as_ref()
        .map(|path| {
            std::fs::File::create(path)
                .with_context(|| format!("creating reflection log {}", path.display()))
        })
        .transpose()?;

    let mut rows = Vec::new();
    for (i, episode) in episodes.iter().enumerate() {
        let per_episode_oracle;
        let backend: &dyn DecisionBackend = match &runner {
            Runner::PerEpisodeOracle => {
                per_episode_oracle =
                    OracleScriptBackend::new(OracleScript::clean(episode.reference_path.clone()));
                &per_episode_oracle
            }
            Runner::Shared(backend) => backend.as_ref(),
        };

        let (result, traces) =
            run_episode(&graph, episode, &memory, embedder.as_ref(), backend, &run_cfg)?;
        if let Some(dir) = &cfg.traces_dir {
            write_traces(dir, &episode.id, &traces)?;
        }

        let mut row = EpisodeRow::new(&episode.id, result.metrics, result.history().len());
        row.error = result.error.clone();

        // Reflection: classification always, commits only in continual mode
        // (and never in the scene-description ablation or after an abort).
        let commit = cfg.continual && !cfg.scene_description_mode && result.error.is_none();
        let mut record = ReflectionRecord {
            episode_id: episode.id.clone(),
            verdict: None,
            failure_type: None,
            first_wrong_step: None,
            budget_exhausted: !result.stopped,
            committed: commit,
            insert_outcomes: Vec::new(),
            note: result.error.clone(),
        };
        let reflected = if commit {
            reflect_and_commit(
                &mut memory,
                &graph,
                episode,
                &result,
                embedder.as_ref(),
                cfg.radius,
            )
        } else {
            classify(&graph, episode, &result, cfg.radius).map(|o| (o, Vec::new()))
        };
        match reflected {
            Ok((outcome, outcomes)) => {
                row.set_verdict(outcome);
                row.insert_outcomes = outcomes
                    .into_iter()
                    .map(|(viewpoint, outcome)| (viewpoint, outcome.to_string()))
                    .collect();
                record.verdict = Some(if row.verdict.as_deref() == Some("success") {
                    "success"
                } else {
                    "failure"
                });
                record.failure_type = row.verdict.clone().filter(|v| v != "success");
                record.first_wrong_step = row.first_wrong_step;
                record.insert_outcomes = row.insert_outcomes.clone();
            }
            Err(ReflectionError::NoDecisions) => {
                record.committed = false;
                record.note = Some("no decisions to classify".to_string());
            }
            Err(e) => {
                let message = format!("reflection: {e}");
                record.committed = false;
                record.note = Some(message.clone());
                row.error = Some(match row.error.take() {
                    Some(prior) => format!("{prior}; {message}"),
                    None => message,
                });
            }
        }
        if let Some(file) = reflection_log.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&record)?)?;
        }
        rows.push(row);

        if cfg.continual && (i + 1) % CHECKPOINT_EVERY == 0 {
            if let Some(path) = &cfg.memory_path {
                memory.save(&checkpoint_path(path))?;
            }
        }
    }

    if cfg.continual {
        if let Some(path) = &cfg.memory_path {
            memory.save(path)?;
        }
    }

    let report = RunReport::from_rows(rows);
    if let Some(path) = &cfg.report_path {
        report.save(path)?;
    }
    Ok(report)
}

fn checkpoint_path(memory_path: &Path) -> PathBuf {
    let mut name = memory_path.file_name().unwrap_or_default().to_os_string();
    name.push(".ckpt");
    memory_path.with_file_name(name)
}

fn write_traces(dir: &Path, episode_id: &str, traces: &[StepTrace]) -> anyhow::Result<()> {
    let path = dir.join(format!("{episode_id}.ndjson"));
    let mut file = std::fs::File::create(&path)
        .with_context(|| format!("creating trace file {}", path.display()))?;
    for trace in traces {
        writeln!(file, "{}", serde_json::to_string(trace)?)?;
    }
    Ok(())
}

/// Rescores recorded traces against an environment, independently of any
/// run-time state. Metrics and verdicts equal the ones computed at run time.
pub fn cmd_score(cfg: &ScoreConfig) -> anyhow::Result<RunReport> {
    let graph = EnvironmentGraph::load(&cfg.env_path)?;

    let mut files: Vec<PathBuf> = if cfg.traces_path.is_dir() {
        std::fs::read_dir(&cfg.traces_path)
            .with_context(|| format!("reading traces from {}", cfg.traces_path.display()))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "ndjson"))
            .collect()
    } else {
        vec![cfg.traces_path.clone()]
    };
    files.sort();

    let mut by_episode: BTreeMap<String, Vec<StepTrace>> = BTreeMap::new();
    for file in &files {
        let content = std::fs::read_to_string(file)
            .with_context(|| format!("reading trace file {}", file.display()))?;
        for (lineno, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let trace: StepTrace = serde_json::from_str(line).with_context(|| {
                format!("{}:{}: corrupt trace record", file.display(), lineno + 1)
            })?;
            by_episode
                .entry(trace.episode_id.clone())
                .or_default()
                .push(trace);
        }
    }

    let mut rows = Vec::new();
    for (episode_id, mut records) in by_episode {
        records.sort_by_key(|r| r.step);
        for (i, record) in records.iter().enumerate() {
            if record.step != i {
                bail!("episode {episode_id}: trace steps are not contiguous at {i}");
            }
        }
        let first = &records[0];
        let episode = Episode {
            id: episode_id.clone(),
            instruction: String::new(),
            start_id: first.start_id.clone(),
            goal_id: first.goal_id.clone(),
            reference_path: vec![first.start_id.clone()],
        };

        let mut trajectory = vec![TrajectoryStep {
            viewpoint_id: first.start_id.clone(),
            kind: StepKind::Start,
            rationale: String::new(),
            analysis: String::new(),
            plan: Plan::new(),
        }];
        let mut position = first.start_id.clone();
        let mut stopped = false;
        for record in &records {
            if record.current_viewpoint != position {
                bail!(
                    "episode {episode_id}: step {} was taken at {} but the walk is at {position}",
                    record.step,
                    record.current_viewpoint
                );
            }
            let (kind, next) = if record.action == "STOP" {
                stopped = true;
                (StepKind::Stop, position.clone())
            } else {
                (StepKind::Move, record.action.clone())
            };
            trajectory.push(TrajectoryStep {
                viewpoint_id: next.clone(),
                kind,
                rationale: if record.analysis.is_empty() {
                    format!("selected {}", record.action)
                } else {
                    record.analysis.clone()
                },
                analysis: record.analysis.clone(),
                plan: record.plan.clone(),
            });
            position = next;
        }

        let walk: Vec<String> = trajectory
            .iter()
            .filter(|s| s.kind != StepKind::Stop)
            .map(|s| s.viewpoint_id.clone())
            .collect();
        let metrics = score_episode(&graph, &episode, &walk, stopped, cfg.radius)
            .with_context(|| format!("episode {episode_id}: trace does not fit the environment"))?;
        let result = EpisodeResult {
            episode_id: episode_id.clone(),
            trajectory,
            stopped,
            metrics,
            error: None,
        };

        let mut row = EpisodeRow::new(&episode_id, result.metrics, records.len());
        match classify(&graph, &episode, &result, cfg.radius) {
            Ok(outcome) => row.set_verdict(outcome),
            Err(ReflectionError::NoDecisions) => {}
            Err(e) => row.error = Some(format!("reflection: {e}")),
        }
        rows.push(row);
    }

    let report = RunReport::from_rows(rows);
    if let Some(path) = &cfg.report_path {
        report.save(path)?;
    }
    Ok(report)
}
