//! Generic chat-completions client.
//!
//! `POST {base_url}/chat/completions` with `{model, messages, temperature,
//! top_p, max_tokens}`; the reply text is `choices[0].message.content`.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Message, Policy, PolicyError, TurnContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelClientConfig {
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token; unset means no
    /// `Authorization` header.
    pub api_key_env_var: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
    pub request_timeout_secs: u64,
    /// Attempts after the first one.
    pub retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff_ms: u64,
}

impl Default for ModelClientConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model_name: "default".into(),
            api_key_env_var: Some("EXECBENCH_API_KEY".into()),
            temperature: 0.0,
            top_p: 1.0,
            max_output_tokens: 512,
            request_timeout_secs: 120,
            retries: 3,
            backoff_ms: 1000,
        }
    }
}

impl ModelClientConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) {
            return Err("temperature must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err("top_p must be within [0, 1]".into());
        }
        if self.max_output_tokens < 1 {
            return Err("max_output_tokens must be >= 1".into());
        }
        if self.base_url.is_empty() {
            return Err("base_url is empty".into());
        }
        Ok(())
    }
}

pub struct ModelClient {
    config: ModelClientConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

enum Failure {
    Retry(String),
    Fatal(String),
}

impl ModelClient {
    pub fn new(config: ModelClientConfig) -> Result<Self, String> {
        config.validate()?;
        let api_key = match &config.api_key_env_var {
            Some(var) => std::env::var(var).ok(),
            None => None,
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build();
        Ok(Self { config, agent, api_key })
    }

    pub fn config(&self) -> &ModelClientConfig {
        &self.config
    }

    pub fn request_body(&self, messages: &[Message]) -> Value {
        json!({
            "model": self.config.model_name,
            "messages": messages,
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "max_tokens": self.config.max_output_tokens,
        })
    }

    /// Send `messages`, retrying transport errors, 429 and 5xx.
    pub fn complete(&self, messages: &[Message]) -> Result<String, PolicyError> {
        let body = self.request_body(messages);
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0;
        loop {
            match self.send(&body) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(e)) => return Err(PolicyError::Transport(e)),
                Err(Failure::Retry(e)) if attempt >= self.config.retries => {
                    return Err(PolicyError::Transport(format!("{e} (after {} attempts)", attempt + 1)));
                }
                Err(Failure::Retry(e)) => {
                    log::warn!("model request failed: {e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    fn send(&self, body: &Value) -> Result<String, Failure> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut req = self.agent.post(&url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let text = r.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", text.chars().take(200).collect::<String>());
                return Err(if code == 429 || code >= 500 { Failure::Retry(msg) } else { Failure::Fatal(msg) });
            }
            Err(e) => return Err(Failure::Retry(e.to_string())),
        };
        let v: Value = resp.into_json().map_err(|e| Failure::Retry(format!("bad response body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Failure::Fatal(format!("response has no choices[0].message.content: {v}")))
    }
}

/// A policy backed by a chat model.
pub struct ModelPolicy {
    client: ModelClient,
}

impl ModelPolicy {
    pub fn new(client: ModelClient) -> Self {
        Self { client }
    }
}

impl Policy for ModelPolicy {
    fn respond(&mut self, ctx: &TurnContext<'_>) -> Result<String, PolicyError> {
        self.client.complete(ctx.messages)
    }
}
