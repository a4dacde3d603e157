//! Statistical stand-in for a question-answering model.
//!
//! Each draw returns the true answer with probability `correct_prob`, a
//! refusal with probability `noanswer_prob`, and otherwise one of
//! `distractor_count` fixed wrong answers chosen uniformly. Draws are seeded
//! from `(seed, prompt id, question, temperature, sample index)` so results
//! do not depend on call order or concurrency.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Provider;
use crate::answers::{canonical_decimal, GroundTruth, TaskType};
use crate::datasets::DatasetRecord;
use crate::error::{Error, Result};
use crate::measures::NO_ANSWER;
use crate::selection::PromptSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfig {
    pub correct_prob: f64,
    #[serde(default = "default_distractors")]
    pub distractor_count: usize,
    #[serde(default)]
    pub noanswer_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_distractors() -> usize {
    3
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            correct_prob: 0.7,
            distractor_count: default_distractors(),
            noanswer_prob: 0.0,
            seed: 0,
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.correct_prob) {
            return Err(Error::usage("simulator correct_prob outside [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.noanswer_prob) {
            return Err(Error::usage("simulator noanswer_prob outside [0, 1)"));
        }
        if self.correct_prob + self.noanswer_prob > 1.0 + 1e-12 {
            return Err(Error::usage("simulator correct_prob + noanswer_prob exceeds 1"));
        }
        if self.distractor_count == 0 {
            return Err(Error::usage("simulator distractor_count must be at least 1"));
        }
        Ok(())
    }
}

const OPENERS: &[&str] = &[
    "Let me think about this.",
    "Working through the question step by step.",
    "Considering the details given.",
    "Based on the information in the question,",
    "Checking each possibility in turn.",
];

/// Generator for one draw, derived from the seed and a draw index.
pub fn draw_rng(seed: u64, draw_index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(draw_index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// One simulated completion for a question with the given truth.
pub fn simulate_response<R: Rng + ?Sized>(
    cfg: &SimulatorConfig,
    truth: &GroundTruth,
    task: &TaskType,
    rng: &mut R,
) -> String {
    let opener = OPENERS[rng.random_range(0..OPENERS.len())];
    let u: f64 = rng.random();
    let answer = if u < cfg.correct_prob {
        render_truth(truth, task)
    } else if u < cfg.correct_prob + cfg.noanswer_prob {
        return format!("{opener} I cannot determine the answer.\n{NO_ANSWER}");
    } else {
        let distractors = distractors(truth, task, cfg.distractor_count);
        if distractors.is_empty() {
            render_truth(truth, task)
        } else {
            distractors[rng.random_range(0..distractors.len())].clone()
        }
    };
    format!("{opener} The answer is {answer}.")
}

fn render_truth(truth: &GroundTruth, task: &TaskType) -> String {
    match task {
        TaskType::MultipleChoice { options } => {
            let label = truth.answer.canonical_text();
            match options.iter().find(|o| o.label == label) {
                Some(o) => format!("({}) {}", o.label, o.text),
                None => format!("({label})"),
            }
        }
        _ => truth.answer.canonical_text(),
    }
}

/// The fixed wrong answers for a question, at most `count` of them.
///
/// Multiple choice uses the wrong options in listed order; numeric answers
/// shift every value by 1..=count; text answers rotate the final letter.
fn distractors(truth: &GroundTruth, task: &TaskType, count: usize) -> Vec<String> {
    match task {
        TaskType::MultipleChoice { options } => {
            let label = truth.answer.canonical_text();
            options
                .iter()
                .filter(|o| o.label != label)
                .take(count)
                .map(|o| format!("({}) {}", o.label, o.text))
                .collect()
        }
        TaskType::Numeric => (1..=count)
            .map(|k| {
                truth
                    .answer
                    .elements
                    .iter()
                    .map(|e| match e.as_str().parse::<f64>() {
                        Ok(v) => canonical_decimal(&format!("{}", v + k as f64)),
                        Err(_) => format!("{}{k}", e.as_str()),
                    })
                    .collect::<Vec<_>>()
                    .join(", ")
            })
            .collect(),
        TaskType::TextConcat => {
            let text = truth.answer.canonical_text();
            let Some(last) = text.chars().last() else {
                return Vec::new();
            };
            let stem: String = text.chars().take(text.chars().count() - 1).collect();
            let base = if last.is_ascii_lowercase() { last as u8 - b'a' } else { 0 };
            (1..=count.min(25))
                .map(|k| {
                    let c = (b'a' + (base + k as u8) % 26) as char;
                    format!("{stem}{c}")
                })
                .collect()
        }
    }
}

/// [`Provider`] backed by [`simulate_response`].
///
/// Questions are looked up by text, so every question asked must have been
/// registered. Per-prompt accuracy overrides are keyed by prompt id; prompts
/// flagged as chain-of-thought gain `cot_bonus` accuracy.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimulatorConfig,
    per_prompt: BTreeMap<String, f64>,
    cot_bonus: f64,
    questions: HashMap<String, (GroundTruth, TaskType)>,
}

impl Simulator {
    pub fn new(cfg: SimulatorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Simulator {
            cfg,
            per_prompt: BTreeMap::new(),
            cot_bonus: 0.0,
            questions: HashMap::new(),
        })
    }

    pub fn with_records<'a>(mut self, records: impl IntoIterator<Item = &'a DatasetRecord>) -> Self {
        for r in records {
            self.questions
                .insert(r.prompt_text(), (r.truth.clone(), r.task.clone()));
        }
        self
    }

    pub fn with_prompt_accuracy(mut self, prompt_id: impl Into<String>, correct_prob: f64) -> Self {
        self.per_prompt.insert(prompt_id.into(), correct_prob);
        self
    }

    pub fn with_cot_bonus(mut self, bonus: f64) -> Self {
        self.cot_bonus = bonus;
        self
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.cfg
    }

    /// Effective configuration for one prompt.
    pub fn config_for(&self, prompt: &PromptSpec) -> SimulatorConfig {
        let mut p = self
            .per_prompt
            .get(&prompt.id)
            .copied()
            .unwrap_or(self.cfg.correct_prob);
        if prompt.cot {
            p += self.cot_bonus;
        }
        SimulatorConfig {
            correct_prob: p.clamp(0.0, 1.0 - self.cfg.noanswer_prob),
            ..self.cfg
        }
    }
}

impl Provider for Simulator {
    fn id(&self) -> &str {
        "simulator"
    }

    fn model(&self) -> &str {
        "simulated"
    }

    fn complete(&self, prompt: &PromptSpec, question: &str, temperature: f64, index: usize) -> Result<String> {
        let (truth, task) = self
            .questions
            .get(question)
            .ok_or_else(|| Error::usage("simulator was asked an unregistered question"))?;
        let mut h = Sha256::new();
        for part in [prompt.id.as_bytes(), question.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update(temperature.to_bits().to_le_bytes());
        h.update((index as u64).to_le_bytes());
        let digest = h.finalize();
        let draw = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = draw_rng(self.cfg.seed, draw);
        Ok(simulate_response(&self.config_for(prompt), truth, task, &mut rng))
    }
}
