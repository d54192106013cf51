//! Decision backends. All of them speak the same contract: prompt bundle in,
//! raw Analysis / Planning / Action text out, parseable by
//! [`crate::ragp::parse_decision`]. The episode loop is identical no matter
//! which backend sits behind it.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_sim_or, hybrid_embed, Embedder, EmbeddingError, EmbeddingVector};
use crate::memory::Experience;
use crate::ragp::{assemble_prompt, PromptBundle, RuleKind, RuleMode};

pub const DEFAULT_STOP_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("script: {0}")]
    Script(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// A decision maker. Implementations must be deterministic for identical
/// inputs and seed, and safe for concurrent calls.
pub trait DecisionBackend: Send + Sync {
    fn decide(
        &self,
        bundle: &PromptBundle,
        candidates: &[String],
        seed: u64,
    ) -> Result<String, BackendError>;
}

// ---------------------------------------------------------------------------
// Scripted oracle
// ---------------------------------------------------------------------------

/// A deterministic fault to inject into an otherwise perfect run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptedFault {
    /// Replace the move at `step` with a move to `target`, then stop.
    WrongMove { step: usize, target: String },
    /// Stop at `step` instead of continuing.
    PrematureStop { step: usize },
    /// After reaching the end of the reference path, walk back `count`
    /// steps along it, then stop.
    Overshoot { count: usize },
}

/// Follows a reference path exactly, except where faults say otherwise.
/// Used to produce success, MRD, FGR and PGC shaped episodes on demand.
#[derive(Debug, Clone)]
pub struct OracleScript {
    pub reference_path: Vec<String>,
    pub faults: Vec<ScriptedFault>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ScriptAction {
    Move(String),
    Stop,
}

impl OracleScript {
    pub fn clean(reference_path: Vec<String>) -> Self {
        OracleScript {
            reference_path,
            faults: Vec::new(),
        }
    }

    pub fn with_fault(reference_path: Vec<String>, fault: ScriptedFault) -> Self {
        OracleScript {
            reference_path,
            faults: vec![fault],
        }
    }

    /// Flattens the script into the exact action sequence it will emit.
    /// A wrong move or premature stop truncates the run at its step; an
    /// overshoot extends it backward along the reference path.
    fn compile(&self) -> Vec<ScriptAction> {
        let moves: Vec<ScriptAction> = self
            .reference_path
            .iter()
            .skip(1)
            .map(|id| ScriptAction::Move(id.clone()))
            .collect();

        let terminal = self
            .faults
            .iter()
            .filter_map(|f| match f {
                ScriptedFault::WrongMove { step, target } => {
                    Some((*step, Some(target.clone())))
                }
                ScriptedFault::PrematureStop { step } => Some((*step, None)),
                ScriptedFault::Overshoot { .. } => None,
            })
            .min_by_key(|(step, _)| *step);

        let mut actions = moves;
        if let Some((step, wrong_target)) = terminal {
            actions.truncate(step.min(actions.len()));
            if let Some(target) = wrong_target {
                actions.push(ScriptAction::Move(target));
            }
        } else if let Some(count) = self.faults.iter().find_map(|f| match f {
            ScriptedFault::Overshoot { count } => Some(*count),
            _ => None,
        }) {
            let n = self.reference_path.len();
            for back in 1..=count.min(n.saturating_sub(1)) {
                actions.push(ScriptAction::Move(self.reference_path[n - 1 - back].clone()));
            }
        }
        actions.push(ScriptAction::Stop);
        actions
    }
}

/// Emits the scripted action for the current step, with a fixed-template
/// rationale naming the step.
pub fn oracle_decide(
    script: &OracleScript,
    step: usize,
    candidates: &[String],
) -> Result<String, BackendError> {
    let actions = script.compile();
    let action = actions.get(step).unwrap_or(&ScriptAction::Stop);
    match action {
        ScriptAction::Move(target) => {
            if !candidates.iter().any(|c| c == target) {
                return Err(BackendError::Script(format!(
                    "step {step}: scripted target '{target}' is not a candidate"
                )));
            }
            Ok(format!(
                "Analysis: scripted step {step}: proceed to {target}.\n\
                 Planning: 1. follow the script -> step {}\n\
                 Action: {target}",
                step + 1
            ))
        }
        ScriptAction::Stop => Ok(format!(
            "Analysis: scripted step {step}: stop here.\nPlanning:\nAction: STOP"
        )),
    }
}

pub struct OracleScriptBackend {
    script: OracleScript,
}

impl OracleScriptBackend {
    pub fn new(script: OracleScript) -> Self {
        OracleScriptBackend { script }
    }
}

impl DecisionBackend for OracleScriptBackend {
    fn decide(
        &self,
        bundle: &PromptBundle,
        candidates: &[String],
        _seed: u64,
    ) -> Result<String, BackendError> {
        oracle_decide(&self.script, bundle.history.len(), candidates)
    }
}

// ---------------------------------------------------------------------------
// Greedy embedding policy
// ---------------------------------------------------------------------------

/// Deterministic memory-sensitive baseline. Scores each candidate by the
/// cosine between the instruction embedding and the candidate's hybrid
/// embedding; under a binding rule, a failure-avoidance rule naming a
/// candidate vetoes it and a success route through the current viewpoint
/// overrides the scores.
pub struct GreedyBackend {
    embedder: Arc<dyn Embedder>,
    stop_threshold: f64,
}

impl GreedyBackend {
    pub fn new(embedder: Arc<dyn Embedder>, stop_threshold: f64) -> Self {
        GreedyBackend {
            embedder,
            stop_threshold,
        }
    }
}

impl DecisionBackend for GreedyBackend {
    fn decide(
        &self,
        bundle: &PromptBundle,
        _candidates: &[String],
        _seed: u64,
    ) -> Result<String, BackendError> {
        greedy_decide(bundle, self.embedder.as_ref(), self.stop_threshold)
    }
}

/// True when `text` contains `id` as a whole token (not inside a longer id).
fn text_names_id(text: &str, id: &str) -> bool {
    if id.is_empty() {
        return false;
    }
    let is_id_char = |c: char| c.is_alphanumeric() || c == '_';
    let mut start = 0;
    while let Some(pos) = text[start..].find(id) {
        let at = start + pos;
        let end = at + id.len();
        let before_ok = text[..at].chars().next_back().is_none_or(|c| !is_id_char(c));
        let after_ok = text[end..].chars().next().is_none_or(|c| !is_id_char(c));
        if before_ok && after_ok {
            return true;
        }
        start = end;
    }
    false
}

/// Does the stored route move from `current` directly to `candidate`?
fn route_continues(trajectory: &[String], current: &str, candidate: &str) -> bool {
    trajectory
        .windows(2)
        .any(|w| w[0] == current && w[1] == candidate)
}

pub fn greedy_decide(
    bundle: &PromptBundle,
    embedder: &dyn Embedder,
    stop_threshold: f64,
) -> Result<String, BackendError> {
    let instr = embedder.embed_text(&bundle.instruction)?;
    let current = &bundle.current_viewpoint;

    let current_sim = if bundle.current_landmarks.is_empty() {
        0.0
    } else {
        let here = embedder.embed_text(&bundle.current_landmarks.join(" "))?;
        cosine_sim_or(&instr, &here, 0.0)
    };
    if current_sim >= stop_threshold {
        return Ok(format!(
            "Analysis: stopping at {current}: landmark similarity {current_sim:.3} meets the arrival threshold.\n\
             Planning:\nAction: STOP"
        ));
    }

    // Rule semantics apply only when the rule is presented as binding.
    let rule = match bundle.rule_mode {
        RuleMode::Constraint => bundle.rule.as_ref(),
        _ => None,
    };

    let mut best: Option<(usize, f64)> = None;
    for (i, obs) in bundle.observations.iter().enumerate() {
        let view = match hybrid_embed(&obs.image_ref, &obs.landmarks, embedder) {
            Ok(v) => v,
            Err(EmbeddingError::EmptyHybridInput) => EmbeddingVector::zero(embedder.dimension()),
            Err(e) => return Err(e.into()),
        };
        let mut score = cosine_sim_or(&instr, &view, 0.0);
        if let Some(rule) = rule {
            match rule.kind {
                RuleKind::FailureAvoidance => {
                    if text_names_id(&rule.text, &obs.viewpoint_id) {
                        score = f64::NEG_INFINITY;
                    }
                }
                RuleKind::SuccessGuidance => {
                    if let Experience::Success(route) = &rule.source {
                        if route_continues(&route.trajectory, current, &obs.viewpoint_id) {
                            score = f64::INFINITY;
                        }
                    }
                }
                RuleKind::SceneContext => {}
            }
        }
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }

    let Some((best_i, best_score)) = best else {
        return Ok(format!(
            "Analysis: stopping at {current}: no navigable candidates.\nPlanning:\nAction: STOP"
        ));
    };
    if best_score <= current_sim {
        return Ok(format!(
            "Analysis: stopping at {current}: no candidate improves on current similarity {current_sim:.3}.\n\
             Planning:\nAction: STOP"
        ));
    }

    let target = &bundle.observations[best_i].viewpoint_id;
    if best_score.is_infinite() {
        Ok(format!(
            "Analysis: choosing {target}: a prior successful route continues this way.\n\
             Planning: 1. move to {target} -> follow the prior route\n\
             Action: {target}"
        ))
    } else {
        Ok(format!(
            "Analysis: choosing {target}: best instruction match (score {best_score:.3}).\n\
             Planning: 1. move to {target} -> follow the instruction\n\
             Action: {target}"
        ))
    }
}

// ---------------------------------------------------------------------------
// HTTP chat backend
// ---------------------------------------------------------------------------

/// Configuration for the chat-completion backend. The bearer token usually
/// comes from an environment variable; see the CLI.
#[derive(Debug, Clone)]
pub struct ChatConfig {
    pub endpoint: String,
    pub model: String,
    pub auth_token: Option<String>,
    pub timeout: Duration,
    /// Total attempts per request, including the first.
    pub max_attempts: usize,
    /// Initial backoff between attempts; doubles each retry.
    pub backoff: Duration,
    /// Cap on concurrent requests when decide is called from many threads.
    pub max_in_flight: usize,
}

impl ChatConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        ChatConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            auth_token: None,
            timeout: Duration::from_secs(60),
            max_attempts: 2,
            backoff: Duration::from_millis(250),
            max_in_flight: 4,
        }
    }
}

/// Counting semaphore over std primitives.
struct InFlightGate {
    limit: usize,
    state: std::sync::Mutex<usize>,
    freed: std::sync::Condvar,
}

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate {
            limit: limit.max(1),
            state: std::sync::Mutex::new(0),
            freed: std::sync::Condvar::new(),
        }
    }

    fn enter(&self) -> InFlightPermit<'_> {
        let mut active = self.state.lock().unwrap();
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
        InFlightPermit { gate: self }
    }
}

struct InFlightPermit<'a> {
    gate: &'a InFlightGate,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.gate.state.lock().unwrap() -= 1;
        self.gate.freed.notify_one();
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// Sends the assembled prompt as a single user message over the common
/// chat-completion wire protocol and returns the first choice's text.
/// Transport failures and 5xx responses are retried with exponential
/// backoff up to `max_attempts`.
pub struct ChatBackend {
    config: ChatConfig,
    client: reqwest::blocking::Client,
    gate: InFlightGate,
}

impl ChatBackend {
    pub fn new(config: ChatConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let gate = InFlightGate::new(config.max_in_flight);
        Ok(ChatBackend {
            config,
            client,
            gate,
        })
    }

    pub fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let _permit = self.gate.enter();
        let mut backoff = self.config.backoff;
        let mut last_error = String::new();
        for attempt in 1..=self.config.max_attempts.max(1) {
            if attempt > 1 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(RequestFailure::Fatal(reason)) => {
                    return Err(BackendError::Transport(reason));
                }
                Err(RequestFailure::Retryable(reason)) => last_error = reason,
            }
        }
        Err(BackendError::Transport(format!(
            "gave up after {} attempts: {last_error}",
            self.config.max_attempts.max(1)
        )))
    }

    fn attempt(&self, prompt: &str) -> Result<String, RequestFailure> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
        };
        let mut request = self.client.post(&self.config.endpoint).json(&body);
        if let Some(token) = &self.config.auth_token {
            request = request.bearer_auth(token);
        }
        let response = request
            .send()
            .map_err(|e| RequestFailure::Retryable(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() {
            return Err(RequestFailure::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(RequestFailure::Fatal(format!("HTTP {status}")));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| RequestFailure::Fatal(format!("malformed response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| RequestFailure::Fatal("response has no choices".into()))
    }
}

enum RequestFailure {
    Retryable(String),
    Fatal(String),
}

impl DecisionBackend for ChatBackend {
    fn decide(
        &self,
        bundle: &PromptBundle,
        _candidates: &[String],
        _seed: u64,
    ) -> Result<String, BackendError> {
        self.complete(&assemble_prompt(bundle))
    }
}
