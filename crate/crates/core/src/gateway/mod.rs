//! Chat-completion transport with bounded retries.
//!
//! [`Gateway`] owns the retry loop, backoff and optional rate limiting; the
//! wire is behind [`ChatTransport`]. [`http::HttpChatTransport`] speaks the
//! common `/v1/chat/completions` JSON shape and [`mock::MockTransport`]
//! replays a script for tests.

pub mod http;
pub mod mock;

use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

pub use mock::{install_mock, FnTransport, MockHandle, MockResponse, MockStep, MockTransport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

/// Hint asking the endpoint to restrict its output to one of these strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub allowed_completions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub constraint: Option<Constraint>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        CompletionRequest {
            model_id: model_id.into(),
            messages,
            constraint: None,
            max_tokens: 256,
            temperature: 0.0,
            seed: None,
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages must not be empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// All message contents, concatenated; what mock scripts match against.
    pub fn joined_content(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    /// Connection failure, timeout or 5xx. Retried.
    #[error("transient transport failure: {0}")]
    Transient(String),
    /// 4xx or a malformed response. Not retried.
    #[error("endpoint rejected the request: {0}")]
    Rejected(String),
    #[error("mock exhausted")]
    MockExhausted,
}

pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("transport failed after {attempts} attempts: {}", .log.join("; "))]
    Exhausted { attempts: u32, log: Vec<String> },
    #[error("mock exhausted")]
    MockExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatewayPolicy {
    pub timeout: Duration,
    pub retries: u32,
    /// Base delay; attempt `k` (0-based) waits `backoff * 2^k` before retrying.
    pub backoff: Duration,
}

impl Default for GatewayPolicy {
    fn default() -> Self {
        GatewayPolicy { timeout: Duration::from_secs(60), retries: 2, backoff: Duration::from_millis(500) }
    }
}

impl GatewayPolicy {
    pub fn total_attempts(&self) -> u32 {
        self.retries + 1
    }

    pub fn delay_before_retry(&self, failed_attempt: u32) -> Duration {
        self.backoff.saturating_mul(1u32 << failed_attempt.min(16))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
    pub bytes: usize,
}

/// Token bucket shared by every call through one gateway.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(capacity: u32, refill_per_sec: f64) -> Self {
        RateLimiter {
            capacity: capacity.max(1) as f64,
            refill_per_sec: refill_per_sec.max(f64::MIN_POSITIVE),
            state: Mutex::new((capacity.max(1) as f64, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut guard = self.state.lock().expect("rate limiter poisoned");
                let (tokens, last) = &mut *guard;
                let now = Instant::now();
                *tokens = (*tokens + now.duration_since(*last).as_secs_f64() * self.refill_per_sec).min(self.capacity);
                *last = now;
                if *tokens >= 1.0 {
                    *tokens -= 1.0;
                    return;
                }
                (1.0 - *tokens) / self.refill_per_sec
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

pub struct Gateway {
    transport: Arc<dyn ChatTransport>,
    policy: GatewayPolicy,
    limiter: Option<Arc<RateLimiter>>,
}

impl Gateway {
    pub fn new(transport: Arc<dyn ChatTransport>, policy: GatewayPolicy) -> Self {
        Gateway { transport, policy, limiter: None }
    }

    pub fn with_rate_limit(mut self, limiter: Arc<RateLimiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn policy(&self) -> &GatewayPolicy {
        &self.policy
    }

    /// Sends `request`, retrying transient failures up to `policy.retries`.
    pub fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        request.validate()?;
        let mut log = Vec::new();
        let total = self.policy.total_attempts();
        for attempt in 0..total {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match self.transport.send(request) {
                Ok(text) => {
                    let bytes = text.len();
                    debug!(model = %request.model_id, attempts = attempt + 1, bytes, "completion received");
                    return Ok(Completion { text, attempts: attempt + 1, bytes });
                }
                Err(TransportError::Transient(msg)) => {
                    debug!(attempt = attempt + 1, error = %msg, "transient transport failure");
                    log.push(format!("attempt {}: {msg}", attempt + 1));
                    if attempt + 1 < total {
                        thread::sleep(self.policy.delay_before_retry(attempt));
                    }
                }
                Err(TransportError::Rejected(msg)) => return Err(GatewayError::Configuration(msg)),
                Err(TransportError::MockExhausted) => return Err(GatewayError::MockExhausted),
            }
        }
        Err(GatewayError::Exhausted { attempts: total, log })
    }
}
