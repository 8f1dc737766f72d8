//! Expert-model invocation with a shape check and one adaptive retry.

use std::sync::Arc;

use super::ports::{BackendPorts, ExpertModel, ExpertRequest, PortError, PortRole};
use super::subautomaton::SubAutomatonSpec;
use super::{drive, note_drafts, port_seed, Agent, AgentCycleResult, CycleContext, DriveEnd, PortCalls};
use crate::model::{AnswerValue, MemoryDraft, MetricKind, StateId};

const AUTHOR: StateId = StateId::Specialized;

pub const PREDICTION_VARIABLE: &str = "expert_prediction";

pub struct SpecializedAgent {
    spec: SubAutomatonSpec,
    expert: Arc<dyn ExpertModel>,
}

impl SpecializedAgent {
    pub fn new(ports: &BackendPorts) -> Result<Self, PortError> {
        Ok(SpecializedAgent {
            spec: SubAutomatonSpec::specialized(),
            expert: ports.expert_model.clone().ok_or(PortError::Missing { role: PortRole::ExpertModel })?,
        })
    }

    pub fn with_spec(mut self, spec: SubAutomatonSpec) -> Self {
        self.spec = spec;
        self
    }
}

/// Output-shape check for a task of `kind`.
pub fn verify_prediction(kind: MetricKind, prediction: &AnswerValue) -> Result<(), String> {
    if !kind.accepts(prediction) {
        return Err(format!("expected a {} answer", if kind == MetricKind::GroundingIou { "box" } else { "text" }));
    }
    match prediction {
        AnswerValue::Box(b) => b.validate().map_err(|e| e.to_string()),
        AnswerValue::Text(t) if t.trim().is_empty() => Err("empty text".into()),
        AnswerValue::Text(_) => Ok(()),
    }
}

impl Agent for SpecializedAgent {
    fn state(&self) -> StateId {
        AUTHOR
    }

    fn spec(&self) -> Option<&SubAutomatonSpec> {
        Some(&self.spec)
    }

    fn run_cycle(&self, ctx: &CycleContext<'_>) -> AgentCycleResult {
        let task = ctx.memory.task();
        let mut calls = PortCalls::default();
        let mut notes: Vec<String> = Vec::new();
        let mut hint: Option<String> = None;
        let mut prediction: Option<AnswerValue> = None;

        let (end, trail) = drive(&self.spec, |state| match state {
            "InvokeExpert" => {
                let role = PortRole::ExpertModel;
                let attempt = calls.bump(role);
                let request = ExpertRequest {
                    episode_id: ctx.episode_id.to_string(),
                    query: task.query.clone(),
                    image_ref: task.image_ref.clone(),
                    metric_kind: task.metric_kind,
                    hint: hint.clone(),
                    attempt,
                    seed: port_seed(ctx, role, attempt),
                };
                match self.expert.predict(&request) {
                    Ok(p) => {
                        prediction = Some(p);
                        Some("predicted")
                    }
                    Err(e) => {
                        notes.push(format!("expert call failed: {e}"));
                        hint = Some(format!("previous call failed: {e}"));
                        Some("invoke_failed")
                    }
                }
            }
            "VerifyPrediction" => {
                let p = prediction.as_ref().expect("VerifyPrediction follows a prediction");
                match verify_prediction(task.metric_kind, p) {
                    Ok(()) => Some("valid"),
                    Err(reason) => {
                        notes.push(format!("prediction {p} invalid: {reason}"));
                        hint = Some(format!("previous output invalid: {reason}"));
                        Some("invalid")
                    }
                }
            }
            _ => None,
        });

        let mut delta = note_drafts(AUTHOR, "expert", &notes);
        let result = match (end, prediction) {
            (DriveEnd::Returned, Some(p)) => {
                let retries = calls.expert_model.saturating_sub(1);
                let summary = format!("Expert prediction {p} accepted after {retries} retries");
                delta.push(MemoryDraft::variable(AUTHOR, PREDICTION_VARIABLE, p.to_string()));
                delta.push(MemoryDraft::feedback(AUTHOR, summary.clone()));
                delta.push(MemoryDraft::answer(AUTHOR, p));
                AgentCycleResult::ok(AUTHOR, delta, summary)
            }
            (DriveEnd::Returned, None) => {
                AgentCycleResult::unrecoverable(AUTHOR, delta, "Specialized agent returned without a prediction")
            }
            (DriveEnd::Failed(why), _) => {
                AgentCycleResult::unrecoverable(AUTHOR, delta, format!("Specialized agent failed: {why}"))
            }
        };
        result.with_run(calls, trail)
    }
}
