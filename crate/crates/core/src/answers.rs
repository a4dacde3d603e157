//! Turning raw completions into canonical [`Answer`] sets, grading them, and
//! generating last-letter concatenation tasks.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{Answer, Element, NO_ANSWER};

/// Absolute tolerance when comparing numeric elements.
pub const NUMERIC_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskType {
    MultipleChoice { options: Vec<ChoiceOption> },
    Numeric,
    TextConcat,
}

impl TaskType {
    pub fn multiple_choice<L, T>(options: impl IntoIterator<Item = (L, T)>) -> Result<Self>
    where
        L: Into<String>,
        T: Into<String>,
    {
        let task = TaskType::MultipleChoice {
            options: options
                .into_iter()
                .map(|(l, t)| ChoiceOption {
                    label: l.into(),
                    text: t.into(),
                })
                .collect(),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if let TaskType::MultipleChoice { options } = self {
            if options.len() < 2 {
                return Err(Error::validation("multiple choice needs at least two options"));
            }
            let labels: BTreeSet<&str> = options.iter().map(|o| o.label.as_str()).collect();
            if labels.len() != options.len() {
                return Err(Error::validation("multiple choice labels must be distinct"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub answer: Answer,
    /// Worked solution used as the chain-of-thought exemplar text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

impl GroundTruth {
    pub fn new(answer: Answer) -> Self {
        GroundTruth {
            answer,
            explanation: None,
        }
    }

    pub fn with_explanation(mut self, explanation: impl Into<String>) -> Self {
        self.explanation = Some(explanation.into());
        self
    }
}

static PAREN_LABEL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Za-z0-9]+)\)").unwrap());
static NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"-?\d{1,3}(?:,\d{3})+(?:\.\d+)?|-?\d+(?:\.\d+)?|-?\.\d+").unwrap()
});

/// Extracts answers from completions.
///
/// The answer span starts after the last occurrence of any cue (matched
/// case-insensitively); without a cue it is the last non-empty line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalizer {
    pub cues: Vec<String>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            cues: vec!["answer is".into(), "answer:".into()],
        }
    }
}

impl Normalizer {
    pub fn normalize(&self, raw: &str, task: &TaskType) -> Answer {
        if raw.trim().is_empty() || raw.trim_end().ends_with(NO_ANSWER) {
            return Answer::no_answer(raw);
        }
        let (reasoning, span) = self.split(raw);
        let elements: BTreeSet<Element> = match task {
            TaskType::MultipleChoice { options } => {
                match_option(span, options).into_iter().map(Element::new).collect()
            }
            TaskType::Numeric => NUMBER
                .find_iter(span)
                .map(|m| Element::new(canonical_decimal(m.as_str())))
                .collect(),
            TaskType::TextConcat => span
                .split_whitespace()
                .last()
                .map(|t| {
                    t.chars()
                        .filter(|c| c.is_alphanumeric())
                        .flat_map(char::to_lowercase)
                        .collect::<String>()
                })
                .filter(|t| !t.is_empty())
                .map(Element::new)
                .into_iter()
                .collect(),
        };
        let mut answer = if elements.is_empty() {
            Answer::no_answer(raw)
        } else {
            Answer::new(elements, raw)
        };
        let reasoning = reasoning.trim();
        if !reasoning.is_empty() {
            answer.reasoning_text = Some(reasoning.to_string());
        }
        answer
    }

    /// Splits `raw` into (reasoning, answer span).
    fn split<'a>(&self, raw: &'a str) -> (&'a str, &'a str) {
        // ASCII lowering keeps byte offsets aligned with `raw`
        let lower = raw.to_ascii_lowercase();
        let cue_hit = self
            .cues
            .iter()
            .filter_map(|cue| {
                let cue = cue.to_ascii_lowercase();
                lower.rfind(&cue).map(|at| (at, at + cue.len()))
            })
            .max_by_key(|&(at, _)| at);
        if let Some((at, end)) = cue_hit {
            return (&raw[..at], &raw[end..]);
        }
        let trimmed = raw.trim_end();
        match trimmed.rfind('\n') {
            Some(nl) => (&raw[..nl], &trimmed[nl + 1..]),
            None => ("", trimmed),
        }
    }
}

pub fn normalize(raw: &str, task: &TaskType) -> Answer {
    Normalizer::default().normalize(raw, task)
}

fn match_option(span: &str, options: &[ChoiceOption]) -> Option<String> {
    let is_label = |s: &str| options.iter().find(|o| o.label.eq_ignore_ascii_case(s));
    if let Some(o) = PAREN_LABEL
        .captures_iter(span)
        .find_map(|c| is_label(c.get(1).unwrap().as_str()))
    {
        return Some(o.label.clone());
    }
    if let Some(o) = span
        .split(|c: char| !c.is_alphanumeric())
        .find_map(|tok| options.iter().find(|o| o.label == tok))
    {
        return Some(o.label.clone());
    }
    let lower = span.to_lowercase();
    options
        .iter()
        .filter(|o| !o.text.trim().is_empty())
        .filter_map(|o| lower.find(&o.text.to_lowercase()).map(|at| (at, o)))
        .min_by_key(|&(at, o)| (at, std::cmp::Reverse(o.text.len())))
        .map(|(_, o)| o.label.clone())
}

/// Canonical decimal rendering: no grouping commas, no redundant zeros, no `-0`.
pub fn canonical_decimal(token: &str) -> String {
    let cleaned: String = token.chars().filter(|&c| c != ',').collect();
    let (negative, digits) = match cleaned.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, cleaned.as_str()),
    };
    let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
    let int_part = int_part.trim_start_matches('0');
    let int_part = if int_part.is_empty() { "0" } else { int_part };
    let frac_part = frac_part.trim_end_matches('0');
    let mut out = String::new();
    let zero = int_part == "0" && frac_part.is_empty();
    if negative && !zero {
        out.push('-');
    }
    out.push_str(int_part);
    if !frac_part.is_empty() {
        out.push('.');
        out.push_str(frac_part);
    }
    out
}

/// Builds a last-letter concatenation question over the given names.
pub fn generate_ll_task(names: &[impl AsRef<str>]) -> Result<(String, GroundTruth)> {
    if names.is_empty() {
        return Err(Error::usage("last-letter task needs at least one name"));
    }
    let mut letters = String::new();
    for name in names {
        let mut words = name.as_ref().split_whitespace().peekable();
        if words.peek().is_none() {
            return Err(Error::usage("names must contain at least one word"));
        }
        for word in words {
            let last = word.chars().last().expect("split_whitespace yields nonempty words");
            letters.extend(last.to_lowercase());
        }
    }
    let joined = names
        .iter()
        .map(|n| n.as_ref().trim())
        .collect::<Vec<_>>()
        .join(" ");
    let question =
        format!("Take the last letters of each words in \"{joined}\" and concatenate them.");
    Ok((question, GroundTruth::new(Answer::from_tokens([letters]))))
}

pub fn grade(answer: &Answer, truth: &GroundTruth, task: &TaskType) -> bool {
    if answer.is_no_answer() || answer.elements.is_empty() {
        return false;
    }
    match task {
        TaskType::MultipleChoice { .. } | TaskType::TextConcat => {
            answer.same_elements(&truth.answer)
        }
        TaskType::Numeric => {
            let covered = |from: &BTreeSet<Element>, into: &BTreeSet<Element>| {
                from.iter()
                    .all(|a| into.iter().any(|b| numeric_eq(a.as_str(), b.as_str())))
            };
            covered(&answer.elements, &truth.answer.elements)
                && covered(&truth.answer.elements, &answer.elements)
        }
    }
}

fn numeric_eq(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => (x - y).abs() <= NUMERIC_TOLERANCE,
        _ => a == b,
    }
}
