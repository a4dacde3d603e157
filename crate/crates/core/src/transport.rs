//! Blocking JSON-over-HTTP plumbing shared by the chat client and the HTTP embedder.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Name of the environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "DIVPROXY_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles on each later attempt.
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_backoff_ms: 250,
        }
    }
}

impl RetryPolicy {
    /// Exponential backoff with full jitter for the given 1-based retry number.
    pub fn backoff(&self, retry: u32) -> Duration {
        let cap = self
            .base_backoff_ms
            .saturating_mul(1u64 << retry.saturating_sub(1).min(16));
        if cap == 0 {
            return Duration::ZERO;
        }
        Duration::from_millis(rand::rng().random_range(cap / 2..=cap))
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    pub fn new(permits: usize) -> Self {
        Gate {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        GateGuard { gate: self }
    }
}

pub struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.free.lock().unwrap() += 1;
        self.gate.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl JsonClient {
    pub fn new(retry: RetryPolicy, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient { agent, retry }
    }

    /// POST `body` and decode the JSON reply, retrying transport failures,
    /// 429 and 5xx responses per the retry policy.
    pub fn post(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.backoff(attempt));
            }
            match self.post_once(url, bearer, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => last = Some(e),
            }
        }
        Err(Error::Transport(format!(
            "{url}: gave up after {attempts} attempts: {}",
            last.map(|e| e.to_string()).unwrap_or_default()
        )))
    }

    fn post_once(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let payload = serde_json::to_vec(body).map_err(|e| Attempt::Fatal(e.into()))?;
        let mut resp = req
            .send(&payload[..])
            .map_err(|e| Attempt::Retry(Error::Transport(e.to_string())))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(Error::Transport(e.to_string())))?;
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(Error::Transport(format!("HTTP {status}"))));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(Error::Protocol(format!("HTTP {status}: {text}"))));
        }
        serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(Error::Protocol(format!("invalid JSON reply: {e}"))))
    }
}

enum Attempt {
    Retry(Error),
    Fatal(Error),
}
