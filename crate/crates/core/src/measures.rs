//! Set-based diversity measures and majority-vote aggregation.
//!
//! Every answer is a set of canonical [`Element`]s. For a batch of `m`
//! answers the probability of an element is the fraction of answers that
//! contain it; entropy and Gini impurity are computed over those
//! probabilities. The vector-based measure lives in [`crate::embedding`] and
//! is folded into the [`DiversityReport`] by [`diversity_report`].

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::embedding::{self, DistanceMetric, EmbedTarget, Embedder};
use crate::error::{Error, Result};

/// Canonical string token standing in for a missing or unparseable answer.
pub const NO_ANSWER: &str = "<no_answer>";

/// One member of the answer universe, compared by exact canonical string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Element(String);

impl Element {
    pub fn new(token: impl Into<String>) -> Self {
        Element(token.into())
    }

    pub fn no_answer() -> Self {
        Element(NO_ANSWER.to_string())
    }

    pub fn is_no_answer(&self) -> bool {
        self.0 == NO_ANSWER
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for Element {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// A normalized answer: a deduplicated element set plus the text it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub elements: BTreeSet<Element>,
    /// The completion exactly as the provider returned it.
    pub raw_text: String,
    /// Text preceding the final answer cue, when one was found.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_text: Option<String>,
}

impl Answer {
    pub fn new(elements: impl IntoIterator<Item = Element>, raw_text: impl Into<String>) -> Self {
        Answer {
            elements: elements.into_iter().collect(),
            raw_text: raw_text.into(),
            reasoning_text: None,
        }
    }

    /// Answer built from bare tokens, with the raw text set to their rendering.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let elements: BTreeSet<Element> = tokens.into_iter().map(|t| Element::new(t)).collect();
        let raw_text = render_elements(&elements);
        Answer {
            elements,
            raw_text,
            reasoning_text: None,
        }
    }

    pub fn no_answer(raw_text: impl Into<String>) -> Self {
        Answer::new([Element::no_answer()], raw_text)
    }

    pub fn is_no_answer(&self) -> bool {
        self.elements.iter().any(Element::is_no_answer)
    }

    /// Equality used for voting: identical canonical element sets.
    pub fn same_elements(&self, other: &Answer) -> bool {
        self.elements == other.elements
    }

    /// Canonical rendering: elements in sorted order joined by `", "`.
    pub fn canonical_text(&self) -> String {
        render_elements(&self.elements)
    }
}

fn render_elements(elements: &BTreeSet<Element>) -> String {
    elements
        .iter()
        .map(Element::as_str)
        .collect::<Vec<_>>()
        .join(", ")
}

/// The `m` answers returned for one (prompt, question) pair at one temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    samples: Vec<Answer>,
    pub prompt_id: String,
    pub question_id: String,
    pub temperature: f64,
}

impl SampleBatch {
    pub fn new(
        samples: Vec<Answer>,
        prompt_id: impl Into<String>,
        question_id: impl Into<String>,
        temperature: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::usage("sample batch must contain at least one answer"));
        }
        if !(0.0..=2.0).contains(&temperature) {
            return Err(Error::usage(format!(
                "temperature {temperature} outside [0, 2]"
            )));
        }
        Ok(SampleBatch {
            samples,
            prompt_id: prompt_id.into(),
            question_id: question_id.into(),
            temperature,
        })
    }

    /// Batch with placeholder ids at temperature 0; handy for pure computations.
    pub fn from_answers(samples: Vec<Answer>) -> Result<Self> {
        SampleBatch::new(samples, "", "", 0.0)
    }

    pub fn samples(&self) -> &[Answer] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `P(e)` for every element seen in a batch. Values need not sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementDistribution {
    pub probs: BTreeMap<Element, f64>,
}

impl ElementDistribution {
    pub fn get(&self, element: &str) -> Option<f64> {
        self.probs.get(&Element::new(element)).copied()
    }

    /// Probabilities in ascending order, so sums are independent of batch order.
    fn sorted_probs(&self) -> Vec<f64> {
        let mut probs: Vec<f64> = self.probs.values().copied().collect();
        probs.sort_by(f64::total_cmp);
        probs
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Nat,
    Bit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GiniVariant {
    /// `1 - sum P(e)^2` exactly; negative for some multi-element batches.
    #[default]
    Literal,
    /// Rescales `P(e)` to sum to one before applying the literal formula.
    Normalized,
}

pub fn element_distribution(batch: &SampleBatch) -> Result<ElementDistribution> {
    if batch.is_empty() {
        return Err(Error::usage("element distribution of an empty batch"));
    }
    let m = batch.len() as f64;
    let mut counts: BTreeMap<Element, usize> = BTreeMap::new();
    for answer in batch.samples() {
        for element in &answer.elements {
            *counts.entry(element.clone()).or_default() += 1;
        }
    }
    let probs = counts
        .into_iter()
        .map(|(e, k)| (e, k as f64 / m))
        .collect();
    Ok(ElementDistribution { probs })
}

/// Shannon entropy in nats. Zero-probability elements are absent and contribute nothing.
pub fn entropy(dist: &ElementDistribution) -> f64 {
    entropy_with_base(dist, LogBase::Nat)
}

pub fn entropy_with_base(dist: &ElementDistribution, base: LogBase) -> f64 {
    let nats: f64 = dist
        .sorted_probs()
        .into_iter()
        .filter(|&p| p > 0.0 && p < 1.0)
        .map(|p| -p * p.ln())
        .sum();
    match base {
        LogBase::Nat => nats,
        LogBase::Bit => nats / std::f64::consts::LN_2,
    }
}

pub fn gini(dist: &ElementDistribution) -> f64 {
    gini_with_variant(dist, GiniVariant::Literal)
}

pub fn gini_with_variant(dist: &ElementDistribution, variant: GiniVariant) -> f64 {
    let probs = dist.sorted_probs();
    let scale = match variant {
        GiniVariant::Literal => 1.0,
        GiniVariant::Normalized => {
            let total: f64 = probs.iter().sum();
            if total > 0.0 {
                total
            } else {
                1.0
            }
        }
    };
    1.0 - probs.iter().map(|p| (p / scale).powi(2)).sum::<f64>()
}

/// Most frequent answer under element-set equality and its share of the batch.
///
/// Ties go to the answer whose first occurrence comes earliest in batch order.
pub fn majority_vote(batch: &SampleBatch) -> Result<(Answer, f64)> {
    if batch.is_empty() {
        return Err(Error::usage("majority vote over an empty batch"));
    }
    // (first index, count) per distinct element set, in first-occurrence order
    let mut classes: Vec<(usize, usize)> = Vec::new();
    let mut index: HashMap<&BTreeSet<Element>, usize> = HashMap::new();
    for (i, answer) in batch.samples().iter().enumerate() {
        match index.get(&answer.elements) {
            Some(&c) => classes[c].1 += 1,
            None => {
                index.insert(&answer.elements, classes.len());
                classes.push((i, 1));
            }
        }
    }
    let mut best = classes[0];
    for &class in &classes[1..] {
        if class.1 > best.1 {
            best = class;
        }
    }
    let share = best.1 as f64 / batch.len() as f64;
    Ok((batch.samples()[best.0].clone(), share))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DiversityConfig {
    pub log_base: LogBase,
    pub gini: GiniVariant,
    pub metric: DistanceMetric,
    pub target: EmbedTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub entropy: f64,
    pub gini: f64,
    pub centroid_distance: Option<f64>,
    pub majority_answer: Answer,
    pub majority_share: f64,
}

pub fn diversity_report(
    batch: &SampleBatch,
    embedder: Option<&dyn Embedder>,
    cfg: &DiversityConfig,
) -> Result<DiversityReport> {
    let dist = element_distribution(batch)?;
    let (majority_answer, majority_share) = majority_vote(batch)?;
    let centroid_distance = match embedder {
        Some(embedder) => {
            let vectors = embedding::embed_batch(embedder, batch, cfg.target)?;
            Some(embedding::mean_centroid_distance(&vectors, cfg.metric)?)
        }
        None => None,
    };
    Ok(DiversityReport {
        entropy: entropy_with_base(&dist, cfg.log_base),
        gini: gini_with_variant(&dist, cfg.gini),
        centroid_distance,
        majority_answer,
        majority_share,
    })
}
