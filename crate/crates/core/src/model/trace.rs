//! Persisted record of one episode.

use serde::{Deserialize, Serialize};

use super::answer::{AnswerValue, TaskSpec};
use super::memory::MemoryEntry;
use super::state::StateId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqRange {
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: u32,
    pub state: StateId,
    /// Candidates the policy was offered at this step.
    pub candidates: Vec<StateId>,
    /// Memory appended by this step, `[start, end)`.
    pub memory: SeqRange,
    pub rationale: String,
    pub attempts: u8,
    /// The entered agent reported an unrecoverable error.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Outcome {
    /// The last transition entered `Final`.
    Answered { answer: Option<AnswerValue> },
    /// The step limit was reached; `best_effort` is whatever memory holds.
    Exhausted { best_effort: Option<AnswerValue> },
    /// Every agent was masked after failing.
    Failed { best_effort: Option<AnswerValue> },
}

impl Outcome {
    pub fn answer(&self) -> Option<&AnswerValue> {
        match self {
            Outcome::Answered { answer } => answer.as_ref(),
            Outcome::Exhausted { best_effort } | Outcome::Failed { best_effort } => best_effort.as_ref(),
        }
    }

    pub fn is_answered(&self) -> bool {
        matches!(self, Outcome::Answered { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub task: TaskSpec,
    pub steps: Vec<TraceStep>,
    pub outcome: Outcome,
    pub seed: u64,
    pub memory: Vec<MemoryEntry>,
}
