//! Dataset loading and synthesis.
//!
//! Supported layouts (UTF-8; unknown fields are ignored):
//!
//! * `csqa_json`: JSON Lines, one `{"id", "question": {"stem", "choices":
//!   [{"label", "text"}]}, "answerKey"}` per line.
//! * `draw1k_json`: a JSON array (or JSON Lines) of `{"iIndex", "sQuestion",
//!   "lSolutions": [numbers], "lEquations": [strings]}`. Equations become the
//!   ground-truth explanation.
//! * `ll_json`: JSON Lines of `{"id"?, "question", "answer"}`. Missing ids
//!   default to `ll-<line>`.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::answers::{canonical_decimal, generate_ll_task, ChoiceOption, GroundTruth, TaskType};
use crate::error::{Error, Result};
use crate::measures::Answer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub task: TaskType,
    pub truth: GroundTruth,
}

impl DatasetRecord {
    /// The question as shown to a model; multiple-choice options are appended.
    pub fn prompt_text(&self) -> String {
        match &self.task {
            TaskType::MultipleChoice { options } => {
                let choices = options
                    .iter()
                    .map(|o| format!("({}) {}", o.label, o.text))
                    .collect::<Vec<_>>()
                    .join(" ");
                format!("{}\nAnswer Choices: {choices}", self.question)
            }
            _ => self.question.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    #[value(name = "csqa_json")]
    CsqaJson,
    #[value(name = "draw1k_json")]
    Draw1kJson,
    #[value(name = "ll_json")]
    LlJson,
}

#[derive(Deserialize)]
struct CsqaRaw {
    id: String,
    question: CsqaQuestion,
    #[serde(rename = "answerKey")]
    answer_key: String,
}

#[derive(Deserialize)]
struct CsqaQuestion {
    stem: String,
    choices: Vec<ChoiceOption>,
}

#[derive(Deserialize)]
struct DrawRaw {
    #[serde(rename = "iIndex")]
    index: Value,
    #[serde(rename = "sQuestion")]
    question: String,
    #[serde(rename = "lSolutions")]
    solutions: Vec<Value>,
    #[serde(rename = "lEquations", default)]
    equations: Vec<String>,
}

#[derive(Deserialize)]
struct LlRaw {
    #[serde(default)]
    id: Option<Value>,
    question: String,
    answer: String,
}

pub fn load(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse(&text, format)
}

pub fn parse(text: &str, format: DatasetFormat) -> Result<Vec<DatasetRecord>> {
    let records = match format {
        DatasetFormat::CsqaJson => rows::<CsqaRaw>(text)?
            .into_iter()
            .map(|(line, raw)| csqa_record(raw).map_err(|e| at_line(line, e)))
            .collect::<Result<Vec<_>>>()?,
        DatasetFormat::Draw1kJson => rows::<DrawRaw>(text)?
            .into_iter()
            .map(|(line, raw)| draw_record(raw).map_err(|e| at_line(line, e)))
            .collect::<Result<Vec<_>>>()?,
        DatasetFormat::LlJson => rows::<LlRaw>(text)?
            .into_iter()
            .map(|(line, raw)| ll_record(line, raw).map_err(|e| at_line(line, e)))
            .collect::<Result<Vec<_>>>()?,
    };
    check_unique(&records)?;
    Ok(records)
}

fn at_line(line: usize, e: Error) -> Error {
    match e {
        Error::Parse { .. } => e,
        other => Error::Parse {
            line,
            message: other.to_string(),
        },
    }
}

/// JSON array or JSON Lines, each item paired with its 1-based line number.
fn rows<T: DeserializeOwned>(text: &str) -> Result<Vec<(usize, T)>> {
    let parse_err = |e: serde_json::Error, offset: usize| Error::Parse {
        line: e.line() + offset,
        message: e.to_string(),
    };
    if text.trim_start().starts_with('[') {
        let items: Vec<T> = serde_json::from_str(text).map_err(|e| parse_err(e, 0))?;
        // arrays carry no per-item line; report the 1-based item position
        return Ok(items.into_iter().enumerate().map(|(i, t)| (i + 1, t)).collect());
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map(|t| (n + 1, t))
                .map_err(|e| parse_err(e, n))
        })
        .collect()
}

fn csqa_record(raw: CsqaRaw) -> Result<DatasetRecord> {
    let task = TaskType::MultipleChoice {
        options: raw.question.choices,
    };
    task.validate()?;
    let TaskType::MultipleChoice { options } = &task else {
        unreachable!()
    };
    if !options.iter().any(|o| o.label == raw.answer_key) {
        return Err(Error::validation(format!(
            "answerKey {} is not one of the choice labels",
            raw.answer_key
        )));
    }
    Ok(DatasetRecord {
        id: raw.id,
        question: raw.question.stem,
        truth: GroundTruth::new(Answer::from_tokens([raw.answer_key])),
        task,
    })
}

fn draw_record(raw: DrawRaw) -> Result<DatasetRecord> {
    let id = match raw.index {
        Value::String(s) => s,
        other => other.to_string(),
    };
    let values = raw
        .solutions
        .iter()
        .map(|v| match v {
            Value::Number(n) => Ok(canonical_decimal(&render_number(n))),
            Value::String(s) if s.trim().parse::<f64>().is_ok() => Ok(canonical_decimal(s.trim())),
            other => Err(Error::validation(format!("non-numeric solution {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::validation("lSolutions is empty"));
    }
    let mut truth = GroundTruth::new(Answer::from_tokens(values));
    if !raw.equations.is_empty() {
        truth = truth.with_explanation(raw.equations.join("; "));
    }
    Ok(DatasetRecord {
        id,
        question: raw.question,
        task: TaskType::Numeric,
        truth,
    })
}

fn render_number(n: &serde_json::Number) -> String {
    if let Some(i) = n.as_i64() {
        return i.to_string();
    }
    let f = n.as_f64().unwrap_or(f64::NAN);
    // Display for f64 never uses exponent notation
    format!("{f}")
}

fn ll_record(line: usize, raw: LlRaw) -> Result<DatasetRecord> {
    let answer = raw.answer.trim().to_lowercase();
    if answer.is_empty() {
        return Err(Error::validation("empty answer"));
    }
    let id = match raw.id {
        None => format!("ll-{line}"),
        Some(Value::String(s)) => s,
        Some(other) => other.to_string(),
    };
    Ok(DatasetRecord {
        id,
        question: raw.question,
        task: TaskType::TextConcat,
        truth: GroundTruth::new(Answer::from_tokens([answer])),
    })
}

fn check_unique(records: &[DatasetRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::validation(format!("duplicate record id {}", r.id)));
        }
    }
    Ok(())
}

/// Writes records in the given layout (JSON Lines for every format).
pub fn write(records: &[DatasetRecord], format: DatasetFormat, out: &mut impl Write) -> Result<()> {
    for r in records {
        let truth: Vec<String> = r
            .truth
            .answer
            .elements
            .iter()
            .map(|e| e.as_str().to_string())
            .collect();
        let row = match (format, &r.task) {
            (DatasetFormat::CsqaJson, TaskType::MultipleChoice { options }) => serde_json::json!({
                "id": r.id,
                "question": {"stem": r.question, "choices": options},
                "answerKey": truth.first(),
            }),
            (DatasetFormat::Draw1kJson, TaskType::Numeric) => serde_json::json!({
                "iIndex": r.id,
                "sQuestion": r.question,
                "lSolutions": truth.iter().map(|t| t.parse::<f64>().unwrap_or(f64::NAN)).collect::<Vec<_>>(),
                "lEquations": r.truth.explanation.iter().collect::<Vec<_>>(),
            }),
            (DatasetFormat::LlJson, TaskType::TextConcat) => serde_json::json!({
                "id": r.id,
                "question": r.question,
                "answer": truth.join(""),
            }),
            _ => {
                return Err(Error::usage(format!(
                    "record {} cannot be written as {format:?}",
                    r.id
                )))
            }
        };
        serde_json::to_writer(&mut *out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

const FIRST_NAMES: &[&str] = &[
    "Alice", "Bruno", "Carmen", "Dmitri", "Elena", "Farid", "Grace", "Hiro", "Ines", "Jamal",
    "Kofi", "Lena", "Mateo", "Nadia", "Omar", "Priya", "Quinn", "Rosa", "Sven", "Tariq",
    "Uma", "Victor", "Wendy", "Xavier", "Yara", "Zane", "Amy", "John", "Liu", "Maya",
];

const LAST_NAMES: &[&str] = &[
    "Smith", "Chen", "Garcia", "Okafor", "Novak", "Haddad", "Kim", "Rossi", "Silva", "Khan",
    "Muller", "Dubois", "Ivanova", "Tanaka", "Larsen", "Kowalski", "Mendez", "Osei", "Patel",
    "Reyes", "Schmidt", "Torres", "Vargas", "Weber", "Young", "Bauer", "Lopez", "Fischer",
];

/// `count` last-letter records, each over one name of `words_per_name` words.
pub fn synthesize_ll(count: usize, words_per_name: usize, seed: u64) -> Result<Vec<DatasetRecord>> {
    if count == 0 {
        return Err(Error::usage("count must be at least 1"));
    }
    if words_per_name == 0 {
        return Err(Error::usage("words_per_name must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let words: Vec<&str> = (0..words_per_name)
                .map(|w| {
                    let pool = if w + 1 == words_per_name && w > 0 {
                        LAST_NAMES
                    } else {
                        FIRST_NAMES
                    };
                    pool[rng.random_range(0..pool.len())]
                })
                .collect();
            let (question, truth) = generate_ll_task(&[words.join(" ")])?;
            Ok(DatasetRecord {
                id: format!("ll-{i}"),
                question,
                task: TaskType::TextConcat,
                truth,
            })
        })
        .collect()
}

/// `count` synthetic four-option multiple-choice records with seeded answer keys.
pub fn synthesize_multiple_choice(count: usize, seed: u64) -> Result<Vec<DatasetRecord>> {
    if count == 0 {
        return Err(Error::usage("count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = ["A", "B", "C", "D"];
    (0..count)
        .map(|i| {
            let task = TaskType::multiple_choice(
                labels.iter().map(|l| (*l, format!("option {} of item {i}", l.to_lowercase()))),
            )?;
            let key = labels[rng.random_range(0..labels.len())];
            Ok(DatasetRecord {
                id: format!("mc-{i}"),
                question: format!("Synthetic question number {i}?"),
                task,
                truth: GroundTruth::new(Answer::from_tokens([key])),
            })
        })
        .collect()
}
