//! Sources of sampled completions.
//!
//! A [`Provider`] answers one (prompt, question, temperature, sample index)
//! request at a time. [`sample`] fans the `m` requests of a batch out over a
//! bounded worker pool and places the results by sample index, so batch
//! order never depends on arrival order.

mod cache;
mod chat;
mod simulator;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use cache::{CacheMode, CacheRecord, ReplayCache};
pub use chat::{ChatClient, ChatConfig};
pub use simulator::{draw_rng, simulate_response, Simulator, SimulatorConfig};

use crate::answers::{Normalizer, TaskType};
use crate::error::{Error, Result};
use crate::measures::SampleBatch;
use crate::selection::PromptSpec;
use crate::transport::RetryPolicy;

pub trait Provider: Send + Sync {
    /// Stable identifier, part of every replay-cache key.
    fn id(&self) -> &str;

    fn model(&self) -> &str;

    fn complete(
        &self,
        prompt: &PromptSpec,
        question: &str,
        temperature: f64,
        sample_index: usize,
    ) -> Result<String>;
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn model(&self) -> &str {
        (**self).model()
    }
    fn complete(&self, prompt: &PromptSpec, question: &str, t: f64, i: usize) -> Result<String> {
        (**self).complete(prompt, question, t, i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_m() -> usize {
    20
}

fn default_temperature() -> f64 {
    0.7
}

fn default_concurrency() -> usize {
    4
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            m: default_m(),
            temperature: default_temperature(),
            max_concurrency: default_concurrency(),
            retry: RetryPolicy::default(),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::usage("sampling.m must be at least 1"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::usage(format!(
                "sampling.temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_concurrency == 0 {
            return Err(Error::usage("sampling.max_concurrency must be at least 1"));
        }
        Ok(())
    }
}

/// Requests `cfg.m` completions and returns them in sample-index order.
///
/// On failure the error of the lowest failing sample index is returned.
pub fn sample(
    provider: &dyn Provider,
    prompt: &PromptSpec,
    question: &str,
    cfg: &SamplingConfig,
) -> Result<Vec<String>> {
    cfg.validate()?;
    let wrap = |i: usize, e: Error| Error::Provider {
        sample_index: i,
        source: Box::new(e),
    };
    let workers = cfg.max_concurrency.min(cfg.m);
    if workers == 1 {
        return (0..cfg.m)
            .map(|i| {
                provider
                    .complete(prompt, question, cfg.temperature, i)
                    .map_err(|e| wrap(i, e))
            })
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<String>>>> =
        Mutex::new((0..cfg.m).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cfg.m {
                    break;
                }
                let out = provider.complete(prompt, question, cfg.temperature, i);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, slot)| slot.expect("every index is filled").map_err(|e| wrap(i, e)))
        .collect()
}

/// Samples and normalizes one batch.
pub fn sample_batch(
    provider: &dyn Provider,
    prompt: &PromptSpec,
    question_id: &str,
    question: &str,
    task: &TaskType,
    cfg: &SamplingConfig,
    normalizer: &Normalizer,
) -> Result<SampleBatch> {
    let raw = sample(provider, prompt, question, cfg)?;
    let answers = raw.iter().map(|r| normalizer.normalize(r, task)).collect();
    SampleBatch::new(answers, &prompt.id, question_id, cfg.temperature)
}
