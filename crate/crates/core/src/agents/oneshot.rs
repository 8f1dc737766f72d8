//! Single-pass program synthesis: generate, verify, execute.

use std::sync::Arc;

use super::ports::{BackendPorts, CodeInterpreter, PortError, PortRole, TextGenerator};
use super::prompts::{oneshot_code_prompt, AgentResources, MemoryView};
use super::subautomaton::SubAutomatonSpec;
use super::{code, drive, note_drafts, Agent, AgentCycleResult, CodeStage, CycleContext, DriveEnd};
use crate::model::{MemoryDraft, StateId};

const AUTHOR: StateId = StateId::Oneshot;

pub struct OneshotAgent {
    spec: SubAutomatonSpec,
    generator: Arc<dyn TextGenerator>,
    interpreter: Arc<dyn CodeInterpreter>,
    resources: AgentResources,
}

impl OneshotAgent {
    pub fn new(ports: &BackendPorts, resources: AgentResources) -> Result<Self, PortError> {
        Ok(OneshotAgent {
            spec: SubAutomatonSpec::oneshot(),
            generator: ports.code_generator.clone().ok_or(PortError::Missing { role: PortRole::CodeGenerator })?,
            interpreter: ports
                .code_interpreter
                .clone()
                .ok_or(PortError::Missing { role: PortRole::CodeInterpreter })?,
            resources,
        })
    }

    pub fn with_spec(mut self, spec: SubAutomatonSpec) -> Self {
        self.spec = spec;
        self
    }
}

impl Agent for OneshotAgent {
    fn state(&self) -> StateId {
        AUTHOR
    }

    fn spec(&self) -> Option<&SubAutomatonSpec> {
        Some(&self.spec)
    }

    fn run_cycle(&self, ctx: &CycleContext<'_>) -> AgentCycleResult {
        let view = MemoryView::of(ctx.memory);
        let mut stage = CodeStage::new(ctx, self.generator.as_ref(), self.interpreter.as_ref(), true);
        let (end, trail) = drive(&self.spec, |state| match state {
            "GenerateCode" => {
                let prompt = oneshot_code_prompt(&view, &self.resources, stage.retry_note());
                Some(stage.generate(prompt))
            }
            "VerifyCode" => Some(stage.verify()),
            "ExecuteCode" => Some(stage.execute()),
            _ => None,
        });
        let mut delta = note_drafts(AUTHOR, "oneshot", &stage.notes);
        let result = match end {
            DriveEnd::Returned => {
                delta.extend(stage.delta(AUTHOR));
                let answer = stage.answer.as_ref().map(|a| a.to_string()).unwrap_or_default();
                let summary = format!("Oneshot program executed; {} = {answer}", code::FINAL_ANSWER);
                if !stage.printed_anything() {
                    delta.push(MemoryDraft::feedback(AUTHOR, summary.clone()));
                }
                AgentCycleResult::ok(AUTHOR, delta, summary)
            }
            DriveEnd::Failed(why) => {
                AgentCycleResult::unrecoverable(AUTHOR, delta, format!("Oneshot reasoner failed: {why}"))
            }
        };
        result.with_run(stage.calls, trail)
    }
}
