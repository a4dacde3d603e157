use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::Provider;
use crate::error::{Error, Result};
use crate::selection::PromptSpec;
use crate::transport::{JsonClient, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
}

/// OpenAI-compatible chat completions client, one request per sample.
#[derive(Debug, Clone)]
pub struct ChatClient {
    id: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: JsonClient,
}

impl ChatClient {
    pub fn new(cfg: &ChatConfig, api_key: Option<String>) -> Self {
        ChatClient {
            id: "openai-compatible".into(),
            endpoint: format!("{}/chat/completions", cfg.base_url.trim_end_matches('/')),
            model: cfg.model.clone(),
            api_key,
            client: JsonClient::new(cfg.retry, Duration::from_secs(cfg.timeout_secs)),
        }
    }

    pub fn request_body(&self, prompt: &PromptSpec, question: &str, temperature: f64) -> Value {
        let mut messages = Vec::new();
        if !prompt.instruction.is_empty() {
            messages.push(json!({"role": "system", "content": prompt.instruction}));
        }
        messages.push(json!({"role": "user", "content": prompt.render_user(question)}));
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": temperature,
        })
    }
}

impl Provider for ChatClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &PromptSpec, question: &str, temperature: f64, _: usize) -> Result<String> {
        let body = self.request_body(prompt, question, temperature);
        let reply = self.client.post(&self.endpoint, self.api_key.as_deref(), &body)?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Error::Protocol("reply lacks choices[0].message.content".into()))
    }
}
