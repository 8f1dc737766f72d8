//! Deterministic backends and agents for tests and offline runs. Every mock
//! here is a pure function of its request (which carries attempt and seed).

use super::ports::{
    CodeInterpreter, ExecutionOutput, ExecutionRequest, ExpertModel, ExpertRequest, GenerationRequest, PortError,
    PortRole, TextGenerator,
};
use super::{Agent, AgentCycleResult, CycleContext};
use crate::model::{AnswerValue, StateId};

pub struct FnGenerator<F>(pub F);

impl<F> TextGenerator for FnGenerator<F>
where
    F: Fn(&GenerationRequest) -> Result<String, PortError> + Send + Sync,
{
    fn generate(&self, request: &GenerationRequest) -> Result<String, PortError> {
        (self.0)(request)
    }
}

/// Answers attempt `k` of a cycle with `responses[k]`.
#[derive(Debug, Clone)]
pub struct ScriptedGenerator {
    responses: Vec<String>,
}

impl ScriptedGenerator {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        ScriptedGenerator { responses: responses.into_iter().map(Into::into).collect() }
    }
}

impl TextGenerator for ScriptedGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<String, PortError> {
        self.responses.get(request.attempt as usize).cloned().ok_or_else(|| PortError::Backend {
            role: request.role,
            message: format!("script has no response for attempt {}", request.attempt),
        })
    }
}

pub struct FnInterpreter<F>(pub F);

impl<F> CodeInterpreter for FnInterpreter<F>
where
    F: Fn(&ExecutionRequest) -> Result<ExecutionOutput, PortError> + Send + Sync,
{
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionOutput, PortError> {
        (self.0)(request)
    }
}

pub struct FnExpert<F>(pub F);

impl<F> ExpertModel for FnExpert<F>
where
    F: Fn(&ExpertRequest) -> Result<AnswerValue, PortError> + Send + Sync,
{
    fn predict(&self, request: &ExpertRequest) -> Result<AnswerValue, PortError> {
        (self.0)(request)
    }
}

/// Answers attempt `k` of a cycle with `predictions[k]`.
#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    predictions: Vec<AnswerValue>,
}

impl ScriptedExpert {
    pub fn new(predictions: Vec<AnswerValue>) -> Self {
        ScriptedExpert { predictions }
    }
}

impl ExpertModel for ScriptedExpert {
    fn predict(&self, request: &ExpertRequest) -> Result<AnswerValue, PortError> {
        self.predictions.get(request.attempt as usize).cloned().ok_or_else(|| PortError::Backend {
            role: PortRole::ExpertModel,
            message: format!("script has no prediction for attempt {}", request.attempt),
        })
    }
}

/// An agent whose cycle is a closure; for engine tests.
pub struct FnAgent<F> {
    state: StateId,
    f: F,
}

impl<F> FnAgent<F>
where
    F: Fn(&CycleContext<'_>) -> AgentCycleResult + Send + Sync,
{
    pub fn new(state: StateId, f: F) -> Self {
        FnAgent { state, f }
    }
}

impl<F> Agent for FnAgent<F>
where
    F: Fn(&CycleContext<'_>) -> AgentCycleResult + Send + Sync,
{
    fn state(&self) -> StateId {
        self.state
    }

    fn run_cycle(&self, ctx: &CycleContext<'_>) -> AgentCycleResult {
        (self.f)(ctx)
    }
}
