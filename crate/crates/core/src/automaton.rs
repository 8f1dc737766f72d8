//! The episode loop: ask the policy for the next state, run that agent's
//! cycle, append its delta, and handle failure masking and termination.
//!
//! The loop is split so tree expansion can reuse it: [`Checkpoint`] is the
//! complete between-steps state and [`advance`] applies one decision.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::agents::{AgentRegistry, CycleContext};
use crate::model::{
    extract_answer, EpisodeTrace, MemoryDraft, MemoryError, Outcome, SeqRange, SharedMemory, Snapshot, StateId,
    TaskSpec, TraceStep,
};
use crate::policy::{DecisionContext, PolicyDecision, PolicyError, TransitionPolicy};
use crate::prompter::PromptConfig;
use crate::seed;

pub const DEFAULT_MAX_STEPS: u32 = 15;

/// Agents temporarily removed after an unrecoverable cycle.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateMask {
    excluded: BTreeSet<StateId>,
}

impl CandidateMask {
    /// Lifecycle states are ignored; only agents can be masked.
    pub fn insert(&mut self, state: StateId) {
        if state.is_agent() {
            self.excluded.insert(state);
        }
    }

    pub fn clear(&mut self) {
        self.excluded.clear();
    }

    pub fn contains(&self, state: StateId) -> bool {
        self.excluded.contains(&state)
    }

    pub fn is_empty(&self) -> bool {
        self.excluded.is_empty()
    }

    pub fn all_agents_masked(&self) -> bool {
        StateId::AGENTS.iter().all(|s| self.excluded.contains(s))
    }

    pub fn excluded(&self) -> impl Iterator<Item = StateId> + '_ {
        self.excluded.iter().copied()
    }
}

impl FromIterator<StateId> for CandidateMask {
    fn from_iter<I: IntoIterator<Item = StateId>>(iter: I) -> Self {
        let mut m = CandidateMask::default();
        for s in iter {
            m.insert(s);
        }
        m
    }
}

/// Offered next states in canonical order: `Final` from step 1 on, then the
/// unmasked agents. Never `Initial` or `Failure`.
pub fn candidates(_current: StateId, step: u32, mask: &CandidateMask) -> Vec<StateId> {
    let mut out = Vec::with_capacity(4);
    if step >= 1 {
        out.push(StateId::Final);
    }
    for s in [StateId::Specialized, StateId::Oneshot, StateId::Stepwise] {
        if !mask.contains(s) {
            out.push(s);
        }
    }
    out
}

pub type CandidateRule = fn(StateId, u32, &CandidateMask) -> Vec<StateId>;

#[derive(Debug, Clone, Copy)]
pub struct AutomatonConfig {
    pub max_steps: u32,
    pub candidate_rule: CandidateRule,
    pub prompt: PromptConfig,
}

impl Default for AutomatonConfig {
    fn default() -> Self {
        AutomatonConfig { max_steps: DEFAULT_MAX_STEPS, candidate_rule: candidates, prompt: PromptConfig::default() }
    }
}

impl AutomatonConfig {
    pub fn with_max_steps(mut self, max_steps: u32) -> Self {
        self.max_steps = max_steps;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("max_steps must be at least 1")]
    ZeroSteps,
    #[error("transition verifier: {chosen} chosen at step {step} but offered {offered:?}")]
    TransitionVerifier { chosen: StateId, step: u32, offered: Vec<StateId> },
    #[error("policy failed at step {step}: {source}")]
    Policy { step: u32, source: PolicyError },
    #[error("no agent registered for {0}")]
    MissingAgent(StateId),
    #[error("{state} broke the agent contract: {detail}")]
    AgentContract { state: StateId, detail: String },
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("checkpoint is terminal (current state {0})")]
    Terminal(StateId),
}

/// Everything needed to resume an episode between two decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub memory: Snapshot,
    pub current: StateId,
    pub mask: CandidateMask,
    /// Decisions taken so far.
    pub step: u32,
}

impl Checkpoint {
    /// Task description, query and the `Initial` transition, at step 0.
    pub fn initial(task: &TaskSpec) -> Result<Self, EngineError> {
        let mut memory = SharedMemory::new(task.clone());
        memory.append(
            0,
            [
                MemoryDraft::task_description(format!("{}\n{}", task.title, task.description)),
                MemoryDraft::query(task.query.clone()),
                MemoryDraft::transition(StateId::Initial),
            ],
        )?;
        Ok(Checkpoint { memory: memory.snapshot(), current: StateId::Initial, mask: CandidateMask::default(), step: 0 })
    }

    pub fn is_terminal(&self) -> bool {
        self.current == StateId::Final || self.mask.all_agents_masked()
    }

    pub fn candidates(&self, config: &AutomatonConfig) -> Vec<StateId> {
        (config.candidate_rule)(self.current, self.step, &self.mask)
    }
}

/// Result of applying one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Advance {
    pub next: Checkpoint,
    pub record: TraceStep,
    /// Set when the decision entered `Final`, or a failure masked the last agent.
    pub outcome: Option<Outcome>,
}

fn best_effort(memory: &Snapshot) -> Result<Option<crate::model::AnswerValue>, EngineError> {
    Ok(extract_answer(memory)?)
}

/// Applies `decision` to `from`. `offered` is the candidate list the policy
/// saw; a choice outside it is a transition-verifier error.
pub fn advance(
    from: &Checkpoint,
    decision: &PolicyDecision,
    offered: &[StateId],
    agents: &AgentRegistry,
    episode_id: &str,
    cycle_seed: u64,
) -> Result<Advance, EngineError> {
    if from.is_terminal() {
        return Err(EngineError::Terminal(from.current));
    }
    let chosen = decision.chosen;
    if !offered.contains(&chosen) {
        return Err(EngineError::TransitionVerifier { chosen, step: from.step, offered: offered.to_vec() });
    }
    let t = from.step;
    let mut memory = from.memory.to_memory();
    let start = memory.next_seq();
    memory.append(t, [MemoryDraft::transition(chosen)])?;
    let mut mask = from.mask.clone();
    let mut failed = false;
    let current;
    let mut outcome = None;

    if chosen == StateId::Final {
        current = StateId::Final;
        outcome = Some(Outcome::Answered { answer: extract_answer(&memory.snapshot())? });
    } else {
        let agent = agents.get(chosen).ok_or(EngineError::MissingAgent(chosen))?;
        let snapshot = memory.snapshot();
        let result =
            agent.run_cycle(&CycleContext { memory: &snapshot, episode_id, step: t, seed: cycle_seed });
        if result.is_ok() && result.delta.is_empty() {
            return Err(EngineError::AgentContract { state: chosen, detail: "ok cycle with empty delta".into() });
        }
        let ok = result.is_ok();
        memory.append(t, result.delta)?;
        if ok {
            mask.clear();
            current = chosen;
        } else {
            debug!(step = t, agent = %chosen, feedback = %result.feedback, "agent cycle failed; masking");
            memory.append(t, [MemoryDraft::transition(StateId::Failure)])?;
            mask.insert(chosen);
            failed = true;
            current = StateId::Failure;
            if mask.all_agents_masked() {
                outcome = Some(Outcome::Failed { best_effort: best_effort(&memory.snapshot())? });
            }
        }
    }

    let end = memory.next_seq();
    let record = TraceStep {
        step: t,
        state: chosen,
        candidates: offered.to_vec(),
        memory: SeqRange { start, end },
        rationale: decision.rationale.clone(),
        attempts: decision.attempts,
        failed,
    };
    let next = Checkpoint { memory: memory.snapshot(), current, mask, step: t + 1 };
    Ok(Advance { next, record, outcome })
}

pub fn episode_id(seed: u64) -> String {
    format!("ep-{seed:016x}")
}

/// Seed for the agent cycle at step `t` of an episode.
pub fn cycle_seed(episode_seed: u64, t: u32) -> u64 {
    seed::derive(seed::derive_str(episode_seed, "cycle"), &[t as u64])
}

/// Runs one episode to completion.
pub fn run_episode(
    task: &TaskSpec,
    agents: &AgentRegistry,
    policy: &dyn TransitionPolicy,
    config: &AutomatonConfig,
    seed: u64,
) -> Result<EpisodeTrace, EngineError> {
    if config.max_steps == 0 {
        return Err(EngineError::ZeroSteps);
    }
    let id = episode_id(seed);
    let mut cp = Checkpoint::initial(task)?;
    let mut steps = Vec::new();
    let mut outcome = None;
    while cp.step < config.max_steps {
        let offered = cp.candidates(config);
        if offered.is_empty() || cp.mask.all_agents_masked() {
            outcome = Some(Outcome::Failed { best_effort: best_effort(&cp.memory)? });
            break;
        }
        let decision = policy
            .decide(&DecisionContext {
                memory: &cp.memory,
                current: cp.current,
                step: cp.step,
                candidates: &offered,
                seed,
            })
            .map_err(|source| EngineError::Policy { step: cp.step, source })?;
        let adv = advance(&cp, &decision, &offered, agents, &id, cycle_seed(seed, cp.step))?;
        steps.push(adv.record);
        cp = adv.next;
        if let Some(o) = adv.outcome {
            outcome = Some(o);
            break;
        }
    }
    let outcome = match outcome {
        Some(o) => o,
        None => Outcome::Exhausted { best_effort: best_effort(&cp.memory)? },
    };
    Ok(EpisodeTrace { task: task.clone(), steps, outcome, seed, memory: cp.memory.entries().to_vec() })
}
