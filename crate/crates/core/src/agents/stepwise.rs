//! One plan-code-execute step per cycle. Multi-step reasoning happens by the
//! controller selecting this agent again.

use std::sync::Arc;

use super::code::{parse_instructions, select_instruction};
use super::ports::{BackendPorts, CodeInterpreter, PortError, PortRole, TextGenerator};
use super::prompts::{instruction_prompt, stepwise_code_prompt, AgentResources, MemoryView};
use super::subautomaton::SubAutomatonSpec;
use super::{
    drive, generation_request, note_drafts, Agent, AgentCycleResult, CodeStage, CycleContext, DriveEnd,
};
use crate::model::{MemoryDraft, StateId};

const AUTHOR: StateId = StateId::Stepwise;

pub struct StepwiseAgent {
    spec: SubAutomatonSpec,
    planner: Arc<dyn TextGenerator>,
    generator: Arc<dyn TextGenerator>,
    interpreter: Arc<dyn CodeInterpreter>,
    resources: AgentResources,
}

impl StepwiseAgent {
    pub fn new(ports: &BackendPorts, resources: AgentResources) -> Result<Self, PortError> {
        let missing = |role| PortError::Missing { role };
        Ok(StepwiseAgent {
            spec: SubAutomatonSpec::stepwise(),
            planner: ports.instruction_generator.clone().ok_or(missing(PortRole::InstructionGenerator))?,
            generator: ports.code_generator.clone().ok_or(missing(PortRole::CodeGenerator))?,
            interpreter: ports.code_interpreter.clone().ok_or(missing(PortRole::CodeInterpreter))?,
            resources,
        })
    }

    pub fn with_spec(mut self, spec: SubAutomatonSpec) -> Self {
        self.spec = spec;
        self
    }
}

impl Agent for StepwiseAgent {
    fn state(&self) -> StateId {
        AUTHOR
    }

    fn spec(&self) -> Option<&SubAutomatonSpec> {
        Some(&self.spec)
    }

    fn run_cycle(&self, ctx: &CycleContext<'_>) -> AgentCycleResult {
        let view = MemoryView::of(ctx.memory);
        let mut stage = CodeStage::new(ctx, self.generator.as_ref(), self.interpreter.as_ref(), false);
        let mut plan_text: Option<String> = None;
        let mut instruction: Option<String> = None;
        let mut plan_note: Option<String> = None;

        let (end, trail) = drive(&self.spec, |state| match state {
            "GenerateInstructions" => {
                let role = PortRole::InstructionGenerator;
                let attempt = stage.calls.bump(role);
                let prompt = instruction_prompt(&view, &self.resources, plan_note.as_deref());
                match self.planner.generate(&generation_request(ctx, role, prompt, attempt)) {
                    Ok(t) => {
                        plan_text = Some(t);
                        Some("generated")
                    }
                    Err(e) => {
                        let note = format!("instruction generation failed: {e}");
                        stage.notes.push(note.clone());
                        plan_note = Some(note);
                        Some("generation_failed")
                    }
                }
            }
            "VerifyInstructions" => match parse_instructions(plan_text.as_deref().unwrap_or("")) {
                Ok(list) => {
                    instruction = select_instruction(&list).map(|s| s.instruction.clone());
                    Some("valid")
                }
                Err(defect) => {
                    let note = format!("previous instructions invalid: {defect}");
                    stage.notes.push(note.clone());
                    plan_note = Some(note);
                    Some("invalid")
                }
            },
            "GenerateCode" => {
                let prompt =
                    stepwise_code_prompt(&view, &self.resources, instruction.as_deref().unwrap_or(""), stage.retry_note());
                Some(stage.generate(prompt))
            }
            "VerifyCode" => Some(stage.verify()),
            "ExecuteCode" => Some(stage.execute()),
            _ => None,
        });

        let mut delta = note_drafts(AUTHOR, "stepwise", &stage.notes);
        let result = match end {
            DriveEnd::Returned => {
                let step = instruction.clone().unwrap_or_default();
                delta.push(MemoryDraft::instruction(AUTHOR, step.clone()));
                delta.extend(stage.delta(AUTHOR));
                let summary = match &stage.answer {
                    Some(a) => format!("Stepwise step \"{step}\" executed; final_answer = {a}"),
                    None => format!("Stepwise step \"{step}\" executed"),
                };
                if !stage.printed_anything() {
                    delta.push(MemoryDraft::feedback(AUTHOR, summary.clone()));
                }
                AgentCycleResult::ok(AUTHOR, delta, summary)
            }
            DriveEnd::Failed(why) => {
                AgentCycleResult::unrecoverable(AUTHOR, delta, format!("Stepwise reasoner failed: {why}"))
            }
        };
        result.with_run(stage.calls, trail)
    }
}
