//! `/v1/chat/completions`-style HTTP transport.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{ChatTransport, CompletionRequest, Message, TransportError};

/// Bearer credential. Never printed.
#[derive(Clone)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        ApiKey(key.into())
    }

    /// Reads the credential from `var`; `None` if unset or empty.
    pub fn from_env(var: &str) -> Option<Self> {
        std::env::var(var).ok().filter(|v| !v.is_empty()).map(ApiKey)
    }

    fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub endpoint: String,
    pub api_key: Option<ApiKey>,
    pub timeout: Duration,
    /// Request field that carries the allowed-completions list when the
    /// endpoint supports guided output (e.g. `guided_choice`). `None` drops it.
    pub guided_field: Option<String>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReplyMessage,
}

#[derive(Deserialize)]
struct WireReplyMessage {
    content: Option<String>,
}

fn role_name(m: &Message) -> &'static str {
    match m.role {
        super::Role::System => "system",
        super::Role::User => "user",
        super::Role::Assistant => "assistant",
    }
}

/// Request body for `request` in the chat-completions shape.
pub fn request_body(request: &CompletionRequest, guided_field: Option<&str>) -> Value {
    let messages: Vec<WireMessage<'_>> =
        request.messages.iter().map(|m| WireMessage { role: role_name(m), content: &m.content }).collect();
    let mut body = Map::new();
    body.insert("model".into(), json!(request.model_id));
    body.insert("messages".into(), json!(messages));
    body.insert("temperature".into(), json!(request.temperature));
    body.insert("max_tokens".into(), json!(request.max_tokens));
    if let Some(seed) = request.seed {
        body.insert("seed".into(), json!(seed));
    }
    if let (Some(field), Some(c)) = (guided_field, &request.constraint) {
        body.insert(field.to_string(), json!(c.allowed_completions));
    }
    Value::Object(body)
}

/// Extracts `choices[0].message.content`.
pub fn parse_response(raw: &str) -> Result<String, TransportError> {
    let parsed: WireResponse =
        serde_json::from_str(raw).map_err(|e| TransportError::Rejected(format!("malformed response body: {e}")))?;
    parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| TransportError::Rejected("response has no choices[0].message.content".into()))
}

pub struct HttpChatTransport {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpChatTransport {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpChatTransport { config, agent }
    }
}

impl fmt::Debug for HttpChatTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpChatTransport").field("config", &self.config).finish()
    }
}

impl ChatTransport for HttpChatTransport {
    fn send(&self, request: &CompletionRequest) -> Result<String, TransportError> {
        let body = request_body(request, self.config.guided_field.as_deref());
        let mut call = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {}", key.expose()));
        }
        let mut response = call
            .send(serde_json::to_vec(&body).expect("request body serializes").as_slice())
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| TransportError::Transient(e.to_string()))?;
        match status {
            200..=299 => parse_response(&text),
            400..=499 => Err(TransportError::Rejected(format!("http status {status}"))),
            _ => Err(TransportError::Transient(format!("http status {status}"))),
        }
    }
}
