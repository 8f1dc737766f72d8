//! TOML run configuration. Credentials are never stored here: the file names
//! an environment variable and the key is read from it at startup.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use hyperstate_core::agents::{
    AgentRegistry, AgentResources, BackendPorts, GatewayGenerator, HttpBackend, RemotePort,
};
use hyperstate_core::gateway::http::{ApiKey, HttpChatTransport, HttpConfig};
use hyperstate_core::gateway::{Gateway, GatewayPolicy, RateLimiter};
use hyperstate_core::policy::LlmPolicy;
use hyperstate_core::prompter::PromptConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub max_steps: Option<u32>,
    #[serde(default)]
    pub retry: RetryConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    pub controller: Option<ControllerConfig>,
    pub backend: Option<BackendConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    #[serde(default = "RetryConfig::default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "RetryConfig::default_retries")]
    pub retries: u32,
    #[serde(default = "RetryConfig::default_backoff")]
    pub backoff_ms: u64,
    /// Requests per second across one gateway; unlimited when absent.
    pub rate_limit_per_sec: Option<f64>,
}

impl RetryConfig {
    fn default_timeout() -> u64 {
        60
    }
    fn default_retries() -> u32 {
        2
    }
    fn default_backoff() -> u64 {
        500
    }

    pub fn policy(&self) -> GatewayPolicy {
        GatewayPolicy {
            timeout: Duration::from_secs(self.timeout_secs),
            retries: self.retries,
            backoff: Duration::from_millis(self.backoff_ms),
        }
    }
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig {
            timeout_secs: Self::default_timeout(),
            retries: Self::default_retries(),
            backoff_ms: Self::default_backoff(),
            rate_limit_per_sec: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Chat-completions URL.
    pub endpoint: String,
    pub model_id: String,
    /// Environment variable holding the bearer key.
    pub api_key_env: Option<String>,
    /// Request field for guided choice, e.g. `guided_choice`.
    pub guided_field: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    /// Backend-protocol URL serving every agent port.
    pub endpoint: String,
    /// Route instruction generation through the chat endpoint instead.
    pub instruction_model_id: Option<String>,
    /// Route code generation through the chat endpoint instead.
    pub code_model_id: Option<String>,
    /// Uniform override of every micro-state retry budget.
    pub retry_budget: Option<u32>,
    /// JSON file with the agent prompt resources.
    pub resources: Option<PathBuf>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).context("malformed config")?;
        if c.max_steps == Some(0) {
            bail!("max_steps must be at least 1");
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Config::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    fn chat_gateway(&self) -> Result<Arc<Gateway>> {
        let c = self.controller.as_ref().context("config has no [controller] section")?;
        let api_key = match &c.api_key_env {
            Some(var) => Some(ApiKey::from_env(var).with_context(|| format!("environment variable {var} is not set"))?),
            None => None,
        };
        let transport = HttpChatTransport::new(HttpConfig {
            endpoint: c.endpoint.clone(),
            api_key,
            timeout: Duration::from_secs(self.retry.timeout_secs),
            guided_field: c.guided_field.clone(),
        });
        let mut gw = Gateway::new(Arc::new(transport), self.retry.policy());
        if let Some(rate) = self.retry.rate_limit_per_sec {
            gw = gw.with_rate_limit(Arc::new(RateLimiter::new(rate.ceil().max(1.0) as u32, rate)));
        }
        Ok(Arc::new(gw))
    }

    pub fn llm_policy(&self) -> Result<LlmPolicy> {
        let model = &self.controller.as_ref().context("config has no [controller] section")?.model_id;
        Ok(LlmPolicy::new(self.chat_gateway()?, model.clone()).with_prompt_config(self.prompt))
    }

    /// Standard agents over the configured backend.
    pub fn agents(&self) -> Result<AgentRegistry> {
        let b = self.backend.as_ref().context("config has no [backend] section and no --scenario was given")?;
        let remote = Arc::new(RemotePort::new(Arc::new(HttpBackend::new(
            b.endpoint.clone(),
            Duration::from_secs(self.retry.timeout_secs),
        ))));
        let generator = |model: &Option<String>| -> Result<Arc<dyn hyperstate_core::agents::TextGenerator>> {
            Ok(match model {
                Some(m) => Arc::new(GatewayGenerator::new(self.chat_gateway()?, m.clone())),
                None => remote.clone(),
            })
        };
        let ports = BackendPorts {
            instruction_generator: Some(generator(&b.instruction_model_id)?),
            code_generator: Some(generator(&b.code_model_id)?),
            code_interpreter: Some(remote.clone()),
            expert_model: Some(remote.clone()),
        };
        let resources = match &b.resources {
            Some(p) => serde_json::from_str(
                &std::fs::read_to_string(p).with_context(|| format!("reading resources {}", p.display()))?,
            )
            .with_context(|| format!("malformed resources {}", p.display()))?,
            None => AgentResources::default(),
        };
        Ok(AgentRegistry::standard(&ports, resources, b.retry_budget)?)
    }
}
