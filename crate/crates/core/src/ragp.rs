//! The per-step decision pipeline: observe candidates, grow the topological
//! map, fuse candidate views with instruction-aware attention, retrieve the
//! most relevant prior experience, rewrite it as a navigation rule, assemble
//! the prompt, and parse the backend's structured reply.
//!
//! One episode runs single-threaded. Memory is only read here; reflection
//! owns all writes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{
    fuse_observations, hybrid_embed, Embedder, EmbeddingError, EmbeddingVector, FusionWeights,
};
use crate::env::{score_episode, EnvError, EnvironmentGraph, Episode, MetricSet};
use crate::memory::{Experience, ExperienceMemory, RetrievalHit};
use crate::policy::DecisionBackend;

pub const DEFAULT_MAX_STEPS: usize = 15;
pub const DEFAULT_RETRIEVAL_THRESHOLD: f64 = 0.55;
pub const DEFAULT_PARSE_RETRIES: usize = 2;

#[derive(Debug, Error)]
pub enum RagpError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("reply has no Action section")]
    MissingAction,
    #[error("action '{action}' is neither STOP nor a candidate viewpoint")]
    InvalidAction { action: String },
}

/// How a retrieved rule is presented to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMode {
    /// Rule rendered first, labeled as binding and taking precedence.
    Constraint,
    /// Rule appended among the observations with no priority label.
    PlainContext,
    /// Rule omitted entirely.
    None,
}

impl std::fmt::Display for RuleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RuleMode::Constraint => "constraint",
            RuleMode::PlainContext => "plain_context",
            RuleMode::None => "none",
        })
    }
}

/// Incrementally grown map of everything observed so far. Nodes carry the
/// landmark snapshot taken when first seen.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopoMap {
    nodes: BTreeMap<String, Vec<String>>,
    edges: BTreeSet<(String, String)>,
}

impl TopoMap {
    pub fn new() -> Self {
        TopoMap::default()
    }

    /// Adds the current viewpoint, its neighbors, and the connecting edges.
    /// Idempotent for repeated visits.
    pub fn expand(
        &mut self,
        current_id: &str,
        current_landmarks: &[String],
        neighbors: &[(String, Vec<String>)],
    ) {
        self.nodes
            .entry(current_id.to_string())
            .or_insert_with(|| current_landmarks.to_vec());
        for (id, landmarks) in neighbors {
            self.nodes
                .entry(id.clone())
                .or_insert_with(|| landmarks.clone());
            let key = if current_id <= id.as_str() {
                (current_id.to_string(), id.clone())
            } else {
                (id.clone(), current_id.to_string())
            };
            self.edges.insert(key);
        }
    }

    pub fn nodes(&self) -> &BTreeMap<String, Vec<String>> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(String, String)> {
        &self.edges
    }
}

/// What the agent can see of one candidate viewpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateObservation {
    pub viewpoint_id: String,
    pub image_ref: String,
    pub landmarks: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    SuccessGuidance,
    FailureAvoidance,
    SceneContext,
}

/// A retrieved experience rewritten as an explicit navigation rule. Failure
/// rules carry the panoramic image reference of the viewpoint where the
/// mistake was made, when one exists.
#[derive(Debug, Clone, PartialEq)]
pub struct NavRule {
    pub kind: RuleKind,
    pub text: String,
    pub image_ref: Option<String>,
    /// The experience the rule was synthesized from.
    pub source: Experience,
}

/// Deterministic rule templates over the retrieved experience.
pub fn synthesize_rule(hit: &RetrievalHit) -> NavRule {
    match &hit.experience {
        Experience::Failure(exp) => NavRule {
            kind: RuleKind::FailureAvoidance,
            text: format!(
                "PRIOR FAILURE at viewpoint {}: the choice made for reason '{}' caused {}. \
                 Do not repeat this decision in a similar situation.",
                exp.decision_viewpoint,
                exp.rationale,
                exp.failure_type.describe(),
            ),
            image_ref: if exp.image_ref.is_empty() {
                None
            } else {
                Some(exp.image_ref.clone())
            },
            source: hit.experience.clone(),
        },
        Experience::Success(exp) => NavRule {
            kind: RuleKind::SuccessGuidance,
            text: format!(
                "PRIOR SUCCESS: instruction '{}' was completed via path {}. \
                 Prefer the consistent next step when the context matches.",
                exp.instruction,
                exp.trajectory.join(", "),
            ),
            image_ref: None,
            source: hit.experience.clone(),
        },
        Experience::SceneDescription(exp) => NavRule {
            kind: RuleKind::SceneContext,
            text: format!(
                "SCENE NOTE at viewpoint {}: {}",
                hit.viewpoint_id, exp.description
            ),
            image_ref: None,
            source: hit.experience.clone(),
        },
    }
}

/// One step of a multi-step plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub action: String,
    pub goal: String,
}

pub type Plan = Vec<PlanStep>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NavAction {
    Move(String),
    Stop,
}

impl NavAction {
    pub fn label(&self) -> String {
        match self {
            NavAction::Move(id) => id.clone(),
            NavAction::Stop => "STOP".to_string(),
        }
    }
}

/// Parsed Analysis / Planning / Action reply.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub analysis: String,
    pub plan: Plan,
    pub action: NavAction,
}

/// Everything handed to a decision backend for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub instruction: String,
    pub current_viewpoint: String,
    pub current_landmarks: Vec<String>,
    pub observations: Vec<CandidateObservation>,
    /// Decisions taken so far, oldest first.
    pub history: Vec<TrajectoryStep>,
    pub map: TopoMap,
    pub rule: Option<NavRule>,
    pub rule_mode: RuleMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// The episode's starting position; not a decision.
    Start,
    Move,
    Stop,
}

/// One entry of the trajectory: the position after the step plus the
/// decision record that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub viewpoint_id: String,
    pub kind: StepKind,
    pub rationale: String,
    pub analysis: String,
    pub plan: Plan,
}

impl TrajectoryStep {
    fn start(viewpoint_id: String) -> Self {
        TrajectoryStep {
            viewpoint_id,
            kind: StepKind::Start,
            rationale: String::new(),
            analysis: String::new(),
            plan: Vec::new(),
        }
    }
}

/// A finished episode: the trajectory (start anchor plus one entry per
/// decision), whether a stop was issued, and the metric set.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode_id: String,
    pub trajectory: Vec<TrajectoryStep>,
    pub stopped: bool,
    pub metrics: MetricSet,
    /// Set when the backend failed mid-episode and the run was cut short.
    pub error: Option<String>,
}

impl EpisodeResult {
    /// The walk of positions: start plus every move target.
    pub fn visited_ids(&self) -> Vec<String> {
        self.trajectory
            .iter()
            .filter(|s| s.kind != StepKind::Stop)
            .map(|s| s.viewpoint_id.clone())
            .collect()
    }

    /// The decisions, excluding the start anchor.
    pub fn history(&self) -> &[TrajectoryStep] {
        &self.trajectory[1..]
    }
}

/// Per-step trace record, one JSON line each. Field order is fixed by the
/// struct so identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub episode_id: String,
    pub step: usize,
    pub start_id: String,
    pub goal_id: String,
    pub current_viewpoint: String,
    pub prompt: String,
    pub raw_reply: String,
    pub analysis: String,
    pub plan: Plan,
    /// "STOP" or the move target.
    pub action: String,
    pub retrieval: Option<TraceRetrieval>,
    pub forced_stop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRetrieval {
    pub viewpoint_id: String,
    pub index_id: u64,
    pub score: f64,
}

/// Knobs for the episode loop.
#[derive(Debug, Clone)]
pub struct EpisodeRunConfig {
    pub max_steps: usize,
    /// Retrieval scores below this leave the step ruleless.
    pub retrieval_threshold: f64,
    pub rule_mode: RuleMode,
    pub radius: f64,
    /// Re-asks after an unparsable reply, then forces a stop.
    pub parse_retries: usize,
    pub seed: u64,
    /// Defaults to identity at the embedder's dimension.
    pub fusion_weights: Option<FusionWeights>,
}

impl Default for EpisodeRunConfig {
    fn default() -> Self {
        EpisodeRunConfig {
            max_steps: DEFAULT_MAX_STEPS,
            retrieval_threshold: DEFAULT_RETRIEVAL_THRESHOLD,
            rule_mode: RuleMode::Constraint,
            radius: crate::env::DEFAULT_SUCCESS_RADIUS,
            parse_retries: DEFAULT_PARSE_RETRIES,
            seed: 0,
            fusion_weights: None,
        }
    }
}

/// Renders the prompt deterministically with fixed section headers.
///
/// In constraint mode the rule section comes first and is labeled binding.
/// In plain-context mode the rule text rides along with the observations.
pub fn assemble_prompt(bundle: &PromptBundle) -> String {
    let mut out = String::new();

    if bundle.rule_mode == RuleMode::Constraint {
        if let Some(rule) = &bundle.rule {
            out.push_str("=== NAVIGATION RULE (BINDING CONSTRAINT) ===\n");
            out.push_str("This rule takes precedence over all other context.\n");
            out.push_str(&rule.text);
            out.push('\n');
            if let Some(image) = &rule.image_ref {
                out.push_str(&format!("Failure image: {image}\n"));
            }
            out.push('\n');
        }
    }

    out.push_str("=== INSTRUCTION ===\n");
    out.push_str(&bundle.instruction);
    out.push_str("\n\n=== CURRENT POSITION ===\n");
    out.push_str(&format!(
        "viewpoint {} | landmarks: {}\n",
        bundle.current_viewpoint,
        render_landmarks(&bundle.current_landmarks)
    ));

    out.push_str("\n=== CANDIDATE OBSERVATIONS ===\n");
    if bundle.observations.is_empty() {
        out.push_str("(no navigable candidates)\n");
    }
    for (i, obs) in bundle.observations.iter().enumerate() {
        out.push_str(&format!(
            "{}. viewpoint {} | image: {} | landmarks: {}\n",
            i + 1,
            obs.viewpoint_id,
            if obs.image_ref.is_empty() {
                "(none)"
            } else {
                &obs.image_ref
            },
            render_landmarks(&obs.landmarks)
        ));
    }
    if bundle.rule_mode == RuleMode::PlainContext {
        if let Some(rule) = &bundle.rule {
            out.push_str(&format!("Context note: {}\n", rule.text));
        }
    }

    out.push_str("\n=== HISTORY ===\n");
    if bundle.history.is_empty() {
        out.push_str("(none)\n");
    }
    for (i, step) in bundle.history.iter().enumerate() {
        let verb = match step.kind {
            StepKind::Move => "moved to",
            StepKind::Stop => "stopped at",
            StepKind::Start => "started at",
        };
        out.push_str(&format!(
            "{}. {} {}: {}\n",
            i + 1,
            verb,
            step.viewpoint_id,
            step.rationale
        ));
    }

    out.push_str("\n=== TOPOLOGICAL MAP ===\n");
    if bundle.map.nodes().is_empty() {
        out.push_str("nodes: (none)\n");
    } else {
        let nodes: Vec<String> = bundle
            .map
            .nodes()
            .iter()
            .map(|(id, landmarks)| format!("{id} ({})", render_landmarks(landmarks)))
            .collect();
        out.push_str(&format!("nodes: {}\n", nodes.join("; ")));
    }
    if bundle.map.edges().is_empty() {
        out.push_str("edges: (none)\n");
    } else {
        let edges: Vec<String> = bundle
            .map
            .edges()
            .iter()
            .map(|(a, b)| format!("{a} -- {b}"))
            .collect();
        out.push_str(&format!("edges: {}\n", edges.join("; ")));
    }

    out.push_str(
        "\n=== RESPONSE FORMAT ===\n\
         Reply with exactly these three sections:\n\
         Analysis: your reasoning about the current state\n\
         Planning: numbered \"action -> goal\" lines\n\
         Action: one candidate viewpoint id, or STOP\n",
    );
    out
}

fn render_landmarks(landmarks: &[String]) -> String {
    if landmarks.is_empty() {
        "(none)".to_string()
    } else {
        landmarks.join(", ")
    }
}

/// Extracts the Analysis / Planning / Action sections of a backend reply.
///
/// Planning lines are parsed as "action -> goal" pairs; lines without an
/// arrow become `(line, "")`. The action must be STOP or one of the
/// candidate ids.
pub fn parse_decision(raw: &str, candidates: &[String]) -> Result<Decision, ParseError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Section {
        Preamble,
        Analysis,
        Planning,
        Action,
    }

    let mut analysis_lines: Vec<String> = Vec::new();
    let mut planning_lines: Vec<String> = Vec::new();
    let mut action_text: Option<String> = None;
    let mut section = Section::Preamble;

    for line in raw.lines() {
        let trimmed = line.trim();
        if let Some(rest) = strip_prefix_ci(trimmed, "analysis:") {
            section = Section::Analysis;
            if !rest.is_empty() {
                analysis_lines.push(rest.to_string());
            }
        } else if let Some(rest) = strip_prefix_ci(trimmed, "planning:") {
            section = Section::Planning;
            if !rest.is_empty() {
                planning_lines.push(rest.to_string());
            }
        } else if let Some(rest) = strip_prefix_ci(trimmed, "action:") {
            section = Section::Action;
            if action_text.is_none() && !rest.is_empty() {
                action_text = Some(rest.to_string());
            }
        } else if !trimmed.is_empty() {
            match section {
                Section::Analysis => analysis_lines.push(trimmed.to_string()),
                Section::Planning => planning_lines.push(trimmed.to_string()),
                Section::Action => {
                    if action_text.is_none() {
                        action_text = Some(trimmed.to_string());
                    }
                }
                Section::Preamble => {}
            }
        }
    }

    let action_text = action_text.ok_or(ParseError::MissingAction)?;
    let token = action_text
        .trim()
        .trim_end_matches(['.', ',', '!', ';'])
        .trim();
    let action = if token.eq_ignore_ascii_case("stop") {
        NavAction::Stop
    } else if candidates.iter().any(|c| c == token) {
        NavAction::Move(token.to_string())
    } else {
        return Err(ParseError::InvalidAction {
            action: token.to_string(),
        });
    };

    let plan = planning_lines
        .iter()
        .map(|line| {
            let body = strip_enumeration(line);
            match body.split_once("->") {
                Some((a, g)) => PlanStep {
                    action: a.trim().to_string(),
                    goal: g.trim().to_string(),
                },
                None => PlanStep {
                    action: body.to_string(),
                    goal: String::new(),
                },
            }
        })
        .collect();

    Ok(Decision {
        analysis: analysis_lines.join("\n"),
        plan,
        action,
    })
}

fn strip_prefix_ci<'a>(line: &'a str, prefix: &str) -> Option<&'a str> {
    if line.len() >= prefix.len() && line[..prefix.len()].eq_ignore_ascii_case(prefix) {
        Some(line[prefix.len()..].trim())
    } else {
        None
    }
}

/// Drops leading "1.", "2)", "-", "*" style markers.
fn strip_enumeration(line: &str) -> &str {
    let trimmed = line.trim();
    let rest = trimmed.trim_start_matches(|c: char| c.is_ascii_digit());
    let rest = if rest.len() < trimmed.len() {
        rest.strip_prefix(['.', ')']).unwrap_or(rest)
    } else {
        trimmed.strip_prefix(['-', '*']).unwrap_or(trimmed)
    };
    rest.trim()
}

/// Runs one episode: up to `max_steps` decisions, each built from the
/// observe / expand / fuse / retrieve / assemble / decide / parse chain.
///
/// Memory is read-only here. A backend transport failure aborts the episode
/// and is recorded on the result; the partial trajectory is still scored
/// (not stopped, at the position reached).
pub fn run_episode(
    graph: &EnvironmentGraph,
    episode: &Episode,
    memory: &ExperienceMemory,
    embedder: &dyn Embedder,
    backend: &dyn DecisionBackend,
    cfg: &EpisodeRunConfig,
) -> Result<(EpisodeResult, Vec<StepTrace>), RagpError> {
    episode.validate(graph)?;
    let dimension = embedder.dimension();
    let weights = cfg
        .fusion_weights
        .clone()
        .unwrap_or_else(|| FusionWeights::identity(dimension));
    let instr_embedding = embedder.embed_text(&episode.instruction)?;

    let mut map = TopoMap::new();
    let mut trajectory = vec![TrajectoryStep::start(episode.start_id.clone())];
    let mut traces: Vec<StepTrace> = Vec::new();
    let mut current = episode.start_id.clone();
    let mut stopped = false;
    let mut error: Option<String> = None;

    'steps: for step in 0..cfg.max_steps {
        let current_vp = graph.viewpoint(&current)?;
        let current_landmarks = current_vp.landmarks.clone();
        let observations: Vec<CandidateObservation> = graph
            .neighbors(&current)?
            .iter()
            .map(|(id, _)| {
                let vp = graph.viewpoint(id)?;
                Ok(CandidateObservation {
                    viewpoint_id: vp.id.clone(),
                    image_ref: vp.image_ref.clone(),
                    landmarks: vp.landmarks.clone(),
                })
            })
            .collect::<Result<_, EnvError>>()?;

        let neighbor_nodes: Vec<(String, Vec<String>)> = observations
            .iter()
            .map(|o| (o.viewpoint_id.clone(), o.landmarks.clone()))
            .collect();
        map.expand(&current, &current_landmarks, &neighbor_nodes);

        let mut views = Vec::with_capacity(observations.len());
        for obs in &observations {
            let view = match hybrid_embed(&obs.image_ref, &obs.landmarks, embedder) {
                Ok(v) => v,
                Err(EmbeddingError::EmptyHybridInput) => EmbeddingVector::zero(dimension),
                Err(e) => {
                    error = Some(format!("embedding: {e}"));
                    break 'steps;
                }
            };
            views.push(view);
        }
        let v_obs = if views.is_empty() {
            EmbeddingVector::zero(dimension)
        } else {
            fuse_observations(&instr_embedding, &views, &weights)?
        };

        let hit = memory.retrieve(&v_obs, &instr_embedding, &current, cfg.retrieval_threshold);
        let rule = hit.as_ref().map(synthesize_rule);

        let bundle = PromptBundle {
            instruction: episode.instruction.clone(),
            current_viewpoint: current.clone(),
            current_landmarks,
            observations: observations.clone(),
            history: trajectory[1..].to_vec(),
            map: map.clone(),
            rule,
            rule_mode: cfg.rule_mode,
        };
        let prompt = assemble_prompt(&bundle);
        let candidate_ids: Vec<String> = observations
            .iter()
            .map(|o| o.viewpoint_id.clone())
            .collect();

        let mut decision: Option<Decision> = None;
        let mut raw_reply = String::new();
        for _attempt in 0..=cfg.parse_retries {
            match backend.decide(&bundle, &candidate_ids, cfg.seed) {
                Ok(raw) => {
                    raw_reply = raw;
                    if let Ok(parsed) = parse_decision(&raw_reply, &candidate_ids) {
                        decision = Some(parsed);
                        break;
                    }
                }
                Err(e) => {
                    error = Some(format!("backend: {e}"));
                    break 'steps;
                }
            }
        }
        let forced_stop = decision.is_none();
        let decision = decision.unwrap_or_else(|| Decision {
            analysis: format!(
                "forced stop: reply unparsable after {} attempts",
                cfg.parse_retries + 1
            ),
            plan: Vec::new(),
            action: NavAction::Stop,
        });

        let rationale = if decision.analysis.is_empty() {
            format!("selected {}", decision.action.label())
        } else {
            decision.analysis.clone()
        };
        traces.push(StepTrace {
            episode_id: episode.id.clone(),
            step,
            start_id: episode.start_id.clone(),
            goal_id: episode.goal_id.clone(),
            current_viewpoint: current.clone(),
            prompt,
            raw_reply,
            analysis: decision.analysis.clone(),
            plan: decision.plan.clone(),
            action: decision.action.label(),
            retrieval: hit.as_ref().map(|h| TraceRetrieval {
                viewpoint_id: h.viewpoint_id.clone(),
                index_id: h.index_id,
                score: h.score,
            }),
            forced_stop,
        });

        match &decision.action {
            NavAction::Stop => {
                trajectory.push(TrajectoryStep {
                    viewpoint_id: current.clone(),
                    kind: StepKind::Stop,
                    rationale,
                    analysis: decision.analysis,
                    plan: decision.plan,
                });
                stopped = true;
                break;
            }
            NavAction::Move(target) => {
                trajectory.push(TrajectoryStep {
                    viewpoint_id: target.clone(),
                    kind: StepKind::Move,
                    rationale,
                    analysis: decision.analysis,
                    plan: decision.plan,
                });
                current = target.clone();
            }
        }
    }

    let mut result = EpisodeResult {
        episode_id: episode.id.clone(),
        trajectory,
        stopped,
        metrics: MetricSet {
            ne: f64::NAN,
            success: false,
            oracle_success: false,
            spl: 0.0,
        },
        error,
    };
    result.metrics = score_episode(graph, episode, &result.visited_ids(), stopped, cfg.radius)?;
    Ok((result, traces))
}
