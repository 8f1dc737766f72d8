//! Agent states and their rule-based sub-automata.
//!
//! An agent reads a [`Snapshot`], runs its micro state machine against its
//! backend ports and returns the entries it wants appended. Agents hold no
//! per-episode state.

pub mod code;
pub mod mock;
pub mod oneshot;
pub mod ports;
pub mod prompts;
pub mod specialized;
pub mod stepwise;
pub mod subautomaton;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AnswerValue, MemoryDraft, MetricKind, Snapshot, StateId};
use crate::seed;

pub use code::LiteralInterpreter;
pub use oneshot::OneshotAgent;
pub use ports::{
    BackendPorts, BackendRequest, BackendResponse, BackendTransport, CodeInterpreter, ExecutionOutput,
    ExecutionRequest, ExpertModel, ExpertRequest, GatewayGenerator, GenerationRequest, HttpBackend, PortError,
    PortRole, RemotePort, TextGenerator,
};
pub use prompts::AgentResources;
pub use specialized::SpecializedAgent;
pub use stepwise::StepwiseAgent;
pub use subautomaton::{validate_subautomaton, Defect, Edge, MicroRun, SubAutomatonSpec};

/// Inputs of one agent cycle.
#[derive(Debug, Clone, Copy)]
pub struct CycleContext<'a> {
    pub memory: &'a Snapshot,
    pub episode_id: &'a str,
    pub step: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleStatus {
    Ok,
    Unrecoverable,
}

/// Backend invocations made during one cycle, per port.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortCalls {
    pub instruction_generator: u32,
    pub code_generator: u32,
    pub code_interpreter: u32,
    pub expert_model: u32,
}

impl PortCalls {
    pub fn get(&self, role: PortRole) -> u32 {
        match role {
            PortRole::InstructionGenerator => self.instruction_generator,
            PortRole::CodeGenerator => self.code_generator,
            PortRole::CodeInterpreter => self.code_interpreter,
            PortRole::ExpertModel => self.expert_model,
        }
    }

    fn bump(&mut self, role: PortRole) -> u32 {
        let slot = match role {
            PortRole::InstructionGenerator => &mut self.instruction_generator,
            PortRole::CodeGenerator => &mut self.code_generator,
            PortRole::CodeInterpreter => &mut self.code_interpreter,
            PortRole::ExpertModel => &mut self.expert_model,
        };
        *slot += 1;
        *slot - 1
    }

    pub fn total(&self) -> u32 {
        self.instruction_generator + self.code_generator + self.code_interpreter + self.expert_model
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCycleResult {
    pub status: CycleStatus,
    pub delta: Vec<MemoryDraft>,
    /// Summary line from the agent's verifier.
    pub feedback: String,
    pub calls: PortCalls,
    /// Micro-states visited.
    pub trail: Vec<String>,
}

impl AgentCycleResult {
    pub fn is_ok(&self) -> bool {
        self.status == CycleStatus::Ok
    }

    /// A successful cycle that appends `delta`.
    pub fn ok(author: StateId, mut delta: Vec<MemoryDraft>, feedback: impl Into<String>) -> Self {
        let feedback = feedback.into();
        if delta.is_empty() {
            delta.push(MemoryDraft::feedback(author, feedback.clone()));
        }
        AgentCycleResult { status: CycleStatus::Ok, delta, feedback, calls: PortCalls::default(), trail: Vec::new() }
    }

    /// A failed cycle; the explanation is always appended as feedback.
    pub fn unrecoverable(author: StateId, mut delta: Vec<MemoryDraft>, feedback: impl Into<String>) -> Self {
        let feedback = feedback.into();
        delta.push(MemoryDraft::feedback(author, feedback.clone()));
        AgentCycleResult {
            status: CycleStatus::Unrecoverable,
            delta,
            feedback,
            calls: PortCalls::default(),
            trail: Vec::new(),
        }
    }

    fn with_run(mut self, calls: PortCalls, trail: Vec<String>) -> Self {
        self.calls = calls;
        self.trail = trail;
        self
    }
}

pub trait Agent: Send + Sync {
    fn state(&self) -> StateId;

    /// The sub-automaton this agent walks, if it is spec-driven.
    fn spec(&self) -> Option<&SubAutomatonSpec> {
        None
    }

    fn run_cycle(&self, ctx: &CycleContext<'_>) -> AgentCycleResult;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("{0} is not an agent state")]
    NotAnAgent(StateId),
    #[error("no agent registered for {0}")]
    MissingAgent(StateId),
    #[error(transparent)]
    Port(#[from] PortError),
}

/// Agent implementations keyed by their state.
#[derive(Clone, Default)]
pub struct AgentRegistry {
    agents: BTreeMap<StateId, Arc<dyn Agent>>,
}

impl fmt::Debug for AgentRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.agents.keys()).finish()
    }
}

impl AgentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, agent: Arc<dyn Agent>) -> Result<(), RegistryError> {
        let state = agent.state();
        if !state.is_agent() {
            return Err(RegistryError::NotAnAgent(state));
        }
        self.agents.insert(state, agent);
        Ok(())
    }

    pub fn with(mut self, agent: Arc<dyn Agent>) -> Result<Self, RegistryError> {
        self.insert(agent)?;
        Ok(self)
    }

    pub fn get(&self, state: StateId) -> Option<&Arc<dyn Agent>> {
        self.agents.get(&state)
    }

    /// Errors on the first agent state without an implementation.
    pub fn check_complete(&self) -> Result<(), RegistryError> {
        match StateId::AGENTS.into_iter().find(|s| !self.agents.contains_key(s)) {
            Some(s) => Err(RegistryError::MissingAgent(s)),
            None => Ok(()),
        }
    }

    /// The three standard agents over `ports`. `budget` overrides every
    /// micro-state retry budget.
    pub fn standard(ports: &BackendPorts, resources: AgentResources, budget: Option<u32>) -> Result<Self, RegistryError> {
        let tune = |s: SubAutomatonSpec| match budget {
            Some(b) => s.with_uniform_budget(b),
            None => s,
        };
        AgentRegistry::new()
            .with(Arc::new(
                SpecializedAgent::new(ports)?.with_spec(tune(SubAutomatonSpec::specialized())),
            ))?
            .with(Arc::new(
                OneshotAgent::new(ports, resources.clone())?.with_spec(tune(SubAutomatonSpec::oneshot())),
            ))?
            .with(Arc::new(StepwiseAgent::new(ports, resources)?.with_spec(tune(SubAutomatonSpec::stepwise()))))
    }
}

// Shared micro-loop plumbing.

const MAX_MICRO_EVENTS: usize = 4096;

enum DriveEnd {
    Returned,
    Failed(String),
}

/// Walks `spec`, asking `handle` for the event to fire in each non-terminal
/// micro-state. `handle` returning `None` means it does not know the state.
fn drive(spec: &SubAutomatonSpec, mut handle: impl FnMut(&str) -> Option<&'static str>) -> (DriveEnd, Vec<String>) {
    let mut run = match MicroRun::start(spec) {
        Ok(r) => r,
        Err(e) => return (DriveEnd::Failed(e.to_string()), vec![subautomaton::INITIAL.into()]),
    };
    for _ in 0..MAX_MICRO_EVENTS {
        match run.current() {
            subautomaton::RETURN => return (DriveEnd::Returned, run.trail().to_vec()),
            subautomaton::FAILURE => {
                let why = match run.exhausted() {
                    Some(s) => format!("retry budget exhausted in {s}"),
                    None => "sub-automaton reached Failure".to_string(),
                };
                return (DriveEnd::Failed(why), run.trail().to_vec());
            }
            state => {
                let Some(event) = handle(state) else {
                    return (DriveEnd::Failed(format!("no handler for micro-state {state}")), run.trail().to_vec());
                };
                if let Err(e) = run.fire(event) {
                    return (DriveEnd::Failed(e.to_string()), run.trail().to_vec());
                }
            }
        }
    }
    (DriveEnd::Failed("micro-step limit reached".into()), run.trail().to_vec())
}

fn port_seed(ctx: &CycleContext<'_>, role: PortRole, attempt: u32) -> u64 {
    seed::derive(seed::derive_str(ctx.seed, role.as_str()), &[attempt as u64])
}

fn generation_request(ctx: &CycleContext<'_>, role: PortRole, prompt: String, attempt: u32) -> GenerationRequest {
    GenerationRequest {
        role,
        episode_id: ctx.episode_id.to_string(),
        prompt,
        attempt,
        seed: port_seed(ctx, role, attempt),
    }
}

fn owned_variables(memory: &Snapshot) -> Vec<(String, String)> {
    memory.variables().into_iter().map(|(n, v)| (n.to_string(), v.to_string())).collect()
}

/// Answer carried by a `final_answer` variable, when present.
fn final_answer(kind: MetricKind, out: &ExecutionOutput) -> Result<Option<AnswerValue>, String> {
    let Some(raw) = out.variable(code::FINAL_ANSWER) else {
        return Ok(None);
    };
    let answer = AnswerValue::from_rendered(kind, raw)
        .map_err(|e| format!("{} = {raw} is not a valid answer: {e}", code::FINAL_ANSWER))?;
    answer.validate().map_err(|e| format!("{} = {raw} is not a valid answer: {e}", code::FINAL_ANSWER))?;
    if matches!(&answer, AnswerValue::Text(t) if t.is_empty()) {
        return Err(format!("{} is empty", code::FINAL_ANSWER));
    }
    Ok(Some(answer))
}

/// Generate, verify and execute one program; shared by both code agents.
struct CodeStage<'a> {
    ctx: &'a CycleContext<'a>,
    generator: &'a dyn TextGenerator,
    interpreter: &'a dyn CodeInterpreter,
    require_final_answer: bool,
    calls: PortCalls,
    notes: Vec<String>,
    /// Latest code-stage complaint, fed back into the next code prompt.
    retry_note: Option<String>,
    completion: Option<String>,
    code: Option<String>,
    output: Option<ExecutionOutput>,
    answer: Option<AnswerValue>,
}

impl<'a> CodeStage<'a> {
    fn new(
        ctx: &'a CycleContext<'a>,
        generator: &'a dyn TextGenerator,
        interpreter: &'a dyn CodeInterpreter,
        require_final_answer: bool,
    ) -> Self {
        CodeStage {
            ctx,
            generator,
            interpreter,
            require_final_answer,
            calls: PortCalls::default(),
            notes: Vec::new(),
            retry_note: None,
            completion: None,
            code: None,
            output: None,
            answer: None,
        }
    }

    fn retry_note(&self) -> Option<&str> {
        self.retry_note.as_deref()
    }

    fn complain(&mut self, note: String) {
        self.retry_note = Some(note.clone());
        self.notes.push(note);
    }

    fn generate(&mut self, prompt: String) -> &'static str {
        let role = PortRole::CodeGenerator;
        let attempt = self.calls.bump(role);
        match self.generator.generate(&generation_request(self.ctx, role, prompt, attempt)) {
            Ok(text) => {
                self.completion = Some(text);
                "generated"
            }
            Err(e) => {
                self.complain(format!("code generation failed: {e}"));
                "generation_failed"
            }
        }
    }

    fn verify(&mut self) -> &'static str {
        let checked = extract_or_verify(self.completion.as_deref().unwrap_or(""), self.require_final_answer);
        match checked {
            Ok(code) => {
                self.code = Some(code);
                "valid"
            }
            Err(defect) => {
                self.complain(format!("previous code invalid: {defect}"));
                "invalid"
            }
        }
    }

    fn execute(&mut self) -> &'static str {
        let role = PortRole::CodeInterpreter;
        let attempt = self.calls.bump(role);
        let code = self.code.clone().unwrap_or_default();
        let request = ExecutionRequest {
            episode_id: self.ctx.episode_id.to_string(),
            code,
            prior_code: self.ctx.memory.texts(crate::model::EntryKind::Code).map(str::to_string).collect(),
            variables: owned_variables(self.ctx.memory),
            attempt,
            seed: port_seed(self.ctx, role, attempt),
        };
        let result = self
            .interpreter
            .execute(&request)
            .map_err(|e| e.to_string())
            .and_then(|out| match &out.error {
                Some(err) => Err(format!("previous code raised: {err}")),
                None => Ok(out),
            })
            .and_then(|out| {
                let answer = final_answer(self.ctx.memory.task().metric_kind, &out)?;
                if self.require_final_answer && answer.is_none() {
                    return Err(format!("{} was not assigned", code::FINAL_ANSWER));
                }
                Ok((out, answer))
            });
        match result {
            Ok((out, answer)) => {
                self.output = Some(out);
                self.answer = answer;
                "succeeded"
            }
            Err(msg) => {
                self.complain(msg);
                "runtime_error"
            }
        }
    }

    fn printed_anything(&self) -> bool {
        self.output.as_ref().is_some_and(|o| !o.output.is_empty())
    }

    /// code, variables, printed output, answer; in that order.
    fn delta(&self, author: StateId) -> Vec<MemoryDraft> {
        let mut delta = Vec::new();
        if let Some(code) = &self.code {
            delta.push(MemoryDraft::code(author, code.clone()));
        }
        if let Some(out) = &self.output {
            for (n, v) in &out.variables {
                delta.push(MemoryDraft::variable(author, n.clone(), v.clone()));
            }
            for line in &out.output {
                delta.push(MemoryDraft::feedback(author, line.clone()));
            }
        }
        if let Some(a) = &self.answer {
            delta.push(MemoryDraft::answer(author, a.clone()));
        }
        delta
    }
}

fn extract_or_verify(completion: &str, require_final_answer: bool) -> Result<String, String> {
    let code = code::extract_code(completion)?;
    code::verify_code(&code, require_final_answer)?;
    Ok(code)
}

fn note_drafts(author: StateId, label: &str, notes: &[String]) -> Vec<MemoryDraft> {
    notes
        .iter()
        .enumerate()
        .map(|(i, n)| MemoryDraft::feedback(author, format!("{label} attempt {} failed: {n}", i + 1)))
        .collect()
}
