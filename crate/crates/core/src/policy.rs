//! Transition policies: pick the next state from the offered candidates.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::agents::subautomaton::{self, MicroRun, SubAutomatonSpec};
use crate::gateway::{Constraint, CompletionRequest, Gateway, Message};
use crate::model::{Snapshot, StateId, UnknownState};
use crate::prompter::{self, render_prompt, render_reply, ControllerPrompt, PromptConfig, CONTROLLER_PREAMBLE};
use crate::seed;

#[derive(Debug, Clone, Copy)]
pub struct DecisionContext<'a> {
    pub memory: &'a Snapshot,
    pub current: StateId,
    pub step: u32,
    pub candidates: &'a [StateId],
    /// Episode seed; policies derive their own streams from it and `step`.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub chosen: StateId,
    pub rationale: String,
    /// Controller calls made (LLM policy: 1 or 2; others: 1).
    pub attempts: u8,
    /// True when the LLM policy gave up and chose at random.
    #[serde(default)]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("no candidates offered")]
    NoCandidates,
    #[error("scripted state {state} is not offered at step {step}")]
    NotOffered { state: StateId, step: u32 },
    #[error("script underrun at step {step}")]
    ScriptUnderrun { step: u32 },
    #[error("script line {line}: {source}")]
    BadScript { line: usize, source: UnknownState },
    #[error("reading script {path}: {message}")]
    ScriptIo { path: String, message: String },
}

pub trait TransitionPolicy: Send + Sync {
    fn name(&self) -> &str;
    fn decide(&self, ctx: &DecisionContext<'_>) -> Result<PolicyDecision, PolicyError>;
}

fn random_seed(seed: u64, step: u32) -> u64 {
    seed::derive(seed::derive_str(seed, "random-policy"), &[step as u64])
}

/// Uniform over `candidates`, from a ChaCha8 stream keyed by (seed, step).
pub fn decide_random(candidates: &[StateId], seed: u64, step: u32) -> Result<PolicyDecision, PolicyError> {
    if candidates.is_empty() {
        return Err(PolicyError::NoCandidates);
    }
    let i = seed::rng(random_seed(seed, step)).random_range(0..candidates.len());
    Ok(PolicyDecision { chosen: candidates[i], rationale: "random".into(), attempts: 1, fallback: false })
}

pub fn decide_scripted(script: &[StateId], step: u32, candidates: &[StateId]) -> Result<PolicyDecision, PolicyError> {
    let state = *script.get(step as usize).ok_or(PolicyError::ScriptUnderrun { step })?;
    if !candidates.contains(&state) {
        return Err(PolicyError::NotOffered { state, step });
    }
    Ok(PolicyDecision { chosen: state, rationale: "scripted".into(), attempts: 1, fallback: false })
}

/// Branches for exhaustive expansion, in canonical order.
pub fn enumerate_branches(candidates: &[StateId]) -> Vec<StateId> {
    let mut out = candidates.to_vec();
    out.sort_by_key(|s| s.canonical_rank());
    out.dedup();
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl TransitionPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn decide(&self, ctx: &DecisionContext<'_>) -> Result<PolicyDecision, PolicyError> {
        decide_random(ctx.candidates, ctx.seed, ctx.step)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedPolicy {
    script: Vec<StateId>,
}

impl ScriptedPolicy {
    pub fn new(script: Vec<StateId>) -> Self {
        ScriptedPolicy { script }
    }

    /// One wire name per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut script = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            script.push(StateId::from_wire(line).map_err(|source| PolicyError::BadScript { line: i + 1, source })?);
        }
        Ok(ScriptedPolicy { script })
    }

    pub fn from_file(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PolicyError::ScriptIo { path: path.display().to_string(), message: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn script(&self) -> &[StateId] {
        &self.script
    }
}

impl TransitionPolicy for ScriptedPolicy {
    fn name(&self) -> &str {
        "scripted"
    }

    fn decide(&self, ctx: &DecisionContext<'_>) -> Result<PolicyDecision, PolicyError> {
        decide_scripted(&self.script, ctx.step, ctx.candidates)
    }
}

/// The hyper agent: asks a controller model through the gateway, verifies
/// the reply, re-prompts once on a bad reply and falls back to
/// [`decide_random`] when that fails too.
pub struct LlmPolicy {
    gateway: Arc<Gateway>,
    model_id: String,
    prompt_config: PromptConfig,
    spec: SubAutomatonSpec,
}

impl fmt::Debug for LlmPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmPolicy").field("model_id", &self.model_id).finish_non_exhaustive()
    }
}

impl LlmPolicy {
    pub fn new(gateway: Arc<Gateway>, model_id: impl Into<String>) -> Self {
        LlmPolicy {
            gateway,
            model_id: model_id.into(),
            prompt_config: PromptConfig::default(),
            spec: SubAutomatonSpec::hyper_agent(),
        }
    }

    pub fn with_prompt_config(mut self, config: PromptConfig) -> Self {
        self.prompt_config = config;
        self
    }

    fn request(&self, messages: Vec<Message>, prompt: &ControllerPrompt, seed: u64) -> CompletionRequest {
        let mut req = CompletionRequest::new(self.model_id.clone(), messages);
        req.constraint =
            Some(Constraint { allowed_completions: prompt.candidates.iter().map(|s| render_reply(*s)).collect() });
        req.max_tokens = 32;
        req.seed = Some(seed);
        req
    }

    /// Decides for an already-rendered prompt. Used directly when scoring a
    /// dataset, where only the prompt text is known.
    pub fn decide_prompt(&self, prompt: &ControllerPrompt, seed: u64) -> Result<PolicyDecision, PolicyError> {
        if prompt.candidates.is_empty() {
            return Err(PolicyError::NoCandidates);
        }
        let call_seed = seed::derive(seed::derive_str(seed, "controller"), &[prompt.step as u64]);
        let mut messages = vec![Message::system(CONTROLLER_PREAMBLE), Message::user(prompt.text.clone())];
        let mut attempts = 0u8;
        let mut chosen: Option<(StateId, String)> = None;
        let mut failure = String::new();
        let mut reply = String::new();

        let mut run = MicroRun::start(&self.spec).expect("shipped hyper agent spec starts");
        while !run.is_finished() {
            let event = match run.current() {
                "RenderPrompt" => "rendered",
                "QueryController" => {
                    attempts += 1;
                    match self.gateway.complete(&self.request(messages.clone(), prompt, call_seed)) {
                        Ok(c) => {
                            reply = c.text;
                            "replied"
                        }
                        Err(e) => {
                            failure = format!("gateway error: {e}");
                            "transport_failed"
                        }
                    }
                }
                "VerifyTransition" => match prompter::parse_reply(&reply, prompt) {
                    Ok(s) => {
                        chosen = Some((s, reply.clone()));
                        "valid"
                    }
                    Err(invalid) => {
                        failure = format!("verifier rejected reply ({invalid})");
                        messages.push(Message::assistant(reply.clone()));
                        messages.push(Message::user(format!(
                            "Your previous reply was invalid ({invalid}). Reply with exactly one of the listed states wrapped in <NextState> tags."
                        )));
                        "invalid"
                    }
                },
                other => {
                    failure = format!("unexpected controller micro-state {other}");
                    break;
                }
            };
            if run.fire(event).is_err() {
                break;
            }
        }

        match (run.current(), chosen) {
            (subautomaton::RETURN, Some((state, raw))) => {
                Ok(PolicyDecision { chosen: state, rationale: raw, attempts, fallback: false })
            }
            _ => {
                let mut d = decide_random(&prompt.candidates, seed, prompt.step)?;
                warn!(step = prompt.step, %failure, fallback = %d.chosen, "controller fell back to random");
                d.rationale = format!("fallback to random after {failure}");
                d.attempts = attempts.max(1);
                d.fallback = true;
                Ok(d)
            }
        }
    }
}

impl TransitionPolicy for LlmPolicy {
    fn name(&self) -> &str {
        "llm"
    }

    fn decide(&self, ctx: &DecisionContext<'_>) -> Result<PolicyDecision, PolicyError> {
        let prompt = render_prompt(ctx.memory, ctx.current, ctx.step, ctx.candidates, &self.prompt_config);
        self.decide_prompt(&prompt, ctx.seed)
    }
}
