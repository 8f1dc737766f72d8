//! Backend ports: the pluggable boundary between agents and the models or
//! sandboxes that do the actual work.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gateway::{CompletionRequest, Gateway, Message};
use crate::model::{AnswerValue, MetricKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortRole {
    InstructionGenerator,
    CodeGenerator,
    CodeInterpreter,
    ExpertModel,
}

impl PortRole {
    pub fn as_str(self) -> &'static str {
        match self {
            PortRole::InstructionGenerator => "instruction_generator",
            PortRole::CodeGenerator => "code_generator",
            PortRole::CodeInterpreter => "code_interpreter",
            PortRole::ExpertModel => "expert_model",
        }
    }
}

impl fmt::Display for PortRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PortError {
    #[error("{role} is not configured")]
    Missing { role: PortRole },
    #[error("{role} backend failed: {message}")]
    Backend { role: PortRole, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub role: PortRole,
    pub episode_id: String,
    pub prompt: String,
    /// 0-based regeneration index within the current cycle.
    pub attempt: u32,
    pub seed: u64,
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, PortError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub episode_id: String,
    pub code: String,
    /// Code already executed earlier in the episode, oldest first.
    pub prior_code: Vec<String>,
    /// Rendered variables currently in memory.
    pub variables: Vec<(String, String)>,
    pub attempt: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutput {
    /// Variables assigned by the code, rendered, in first-assignment order.
    pub variables: Vec<(String, String)>,
    /// Printed or logged lines.
    #[serde(default)]
    pub output: Vec<String>,
    /// Runtime error text, if execution raised.
    #[serde(default)]
    pub error: Option<String>,
}

impl ExecutionOutput {
    pub fn variable(&self, name: &str) -> Option<&str> {
        self.variables.iter().rev().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }
}

pub trait CodeInterpreter: Send + Sync {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionOutput, PortError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRequest {
    pub episode_id: String,
    pub query: String,
    pub image_ref: String,
    pub metric_kind: MetricKind,
    /// Set on the adaptive retry: `previous output invalid: <reason>`.
    pub hint: Option<String>,
    pub attempt: u32,
    pub seed: u64,
}

pub trait ExpertModel: Send + Sync {
    fn predict(&self, request: &ExpertRequest) -> Result<AnswerValue, PortError>;
}

/// Every port an agent might need. Agents check for the ones they use.
#[derive(Clone, Default)]
pub struct BackendPorts {
    pub instruction_generator: Option<Arc<dyn TextGenerator>>,
    pub code_generator: Option<Arc<dyn TextGenerator>>,
    pub code_interpreter: Option<Arc<dyn CodeInterpreter>>,
    pub expert_model: Option<Arc<dyn ExpertModel>>,
}

impl fmt::Debug for BackendPorts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendPorts")
            .field("instruction_generator", &self.instruction_generator.is_some())
            .field("code_generator", &self.code_generator.is_some())
            .field("code_interpreter", &self.code_interpreter.is_some())
            .field("expert_model", &self.expert_model.is_some())
            .finish()
    }
}

// Remote wire contract.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub role: PortRole,
    pub episode_id: String,
    pub prompt_or_code: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub ok: bool,
    #[serde(default)]
    pub text_or_result: Value,
    #[serde(default)]
    pub error: Option<String>,
}

pub trait BackendTransport: Send + Sync {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, PortError>;
}

/// Posts [`BackendRequest`]s as JSON to one endpoint.
pub struct HttpBackend {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { endpoint: endpoint.into(), agent }
    }
}

impl BackendTransport for HttpBackend {
    fn call(&self, request: &BackendRequest) -> Result<BackendResponse, PortError> {
        let fail = |message: String| PortError::Backend { role: request.role, message };
        let body = serde_json::to_vec(request).expect("backend request serializes");
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .send(body.as_slice())
            .map_err(|e| fail(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| fail(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(fail(format!("http status {status}")));
        }
        serde_json::from_str(&text).map_err(|e| fail(format!("malformed backend response: {e}")))
    }
}

fn unwrap_response(role: PortRole, resp: BackendResponse) -> Result<Value, PortError> {
    if resp.ok {
        Ok(resp.text_or_result)
    } else {
        Err(PortError::Backend { role, message: resp.error.unwrap_or_else(|| "backend reported failure".into()) })
    }
}

/// Adapts a [`BackendTransport`] to every port trait.
#[derive(Clone)]
pub struct RemotePort {
    transport: Arc<dyn BackendTransport>,
}

impl RemotePort {
    pub fn new(transport: Arc<dyn BackendTransport>) -> Self {
        RemotePort { transport }
    }
}

impl TextGenerator for RemotePort {
    fn generate(&self, request: &GenerationRequest) -> Result<String, PortError> {
        let resp = self.transport.call(&BackendRequest {
            role: request.role,
            episode_id: request.episode_id.clone(),
            prompt_or_code: request.prompt.clone(),
            params: json!({"attempt": request.attempt, "seed": request.seed}),
        })?;
        match unwrap_response(request.role, resp)? {
            Value::String(s) => Ok(s),
            other => Err(PortError::Backend { role: request.role, message: format!("expected text, got {other}") }),
        }
    }
}

impl CodeInterpreter for RemotePort {
    fn execute(&self, request: &ExecutionRequest) -> Result<ExecutionOutput, PortError> {
        let role = PortRole::CodeInterpreter;
        let resp = self.transport.call(&BackendRequest {
            role,
            episode_id: request.episode_id.clone(),
            prompt_or_code: request.code.clone(),
            params: json!({
                "prior_code": request.prior_code,
                "variables": request.variables,
                "attempt": request.attempt,
                "seed": request.seed,
            }),
        })?;
        if !resp.ok {
            // A raised exception is a normal execution result, not a port fault.
            return Ok(ExecutionOutput {
                error: Some(resp.error.unwrap_or_else(|| "execution failed".into())),
                ..ExecutionOutput::default()
            });
        }
        serde_json::from_value(resp.text_or_result)
            .map_err(|e| PortError::Backend { role, message: format!("malformed execution result: {e}") })
    }
}

impl ExpertModel for RemotePort {
    fn predict(&self, request: &ExpertRequest) -> Result<AnswerValue, PortError> {
        let role = PortRole::ExpertModel;
        let resp = self.transport.call(&BackendRequest {
            role,
            episode_id: request.episode_id.clone(),
            prompt_or_code: request.query.clone(),
            params: json!({
                "image_ref": request.image_ref,
                "metric_kind": request.metric_kind,
                "hint": request.hint,
                "attempt": request.attempt,
                "seed": request.seed,
            }),
        })?;
        serde_json::from_value(unwrap_response(role, resp)?)
            .map_err(|e| PortError::Backend { role, message: format!("malformed prediction: {e}") })
    }
}

/// Text generation through the chat-completion gateway.
pub struct GatewayGenerator {
    gateway: Arc<Gateway>,
    model_id: String,
}

impl GatewayGenerator {
    pub fn new(gateway: Arc<Gateway>, model_id: impl Into<String>) -> Self {
        GatewayGenerator { gateway, model_id: model_id.into() }
    }
}

impl TextGenerator for GatewayGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<String, PortError> {
        let mut req = CompletionRequest::new(self.model_id.clone(), vec![Message::user(request.prompt.clone())]);
        req.max_tokens = 1024;
        req.seed = Some(request.seed);
        self.gateway
            .complete(&req)
            .map(|c| c.text)
            .map_err(|e| PortError::Backend { role: request.role, message: e.to_string() })
    }
}
