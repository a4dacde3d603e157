//! Few-shot and chain-of-thought prompt construction, and diversity-based
//! prompt selection.
//!
//! Every candidate prompt is sampled `m` times for a question; the answer
//! returned is the majority answer of the prompt whose batch scored lowest
//! on the chosen diversity criterion.
//!
//! Prompts render as
//!
//! ```text
//! <instruction>
//!
//! Q: <exemplar question>
//! A: [<explanation> ]The answer is <answer>.
//!
//! Q: <question>
//! A:
//! ```

use std::io::Write;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answers::{grade, Normalizer, TaskType};
use crate::datasets::DatasetRecord;
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::measures::{diversity_report, Answer, DiversityConfig, DiversityReport};
use crate::providers::{sample_batch, Provider, SamplingConfig};

pub const DEFAULT_INSTRUCTION: &str =
    "Answer the question. End your response with \"The answer is <answer>.\"";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    /// Id of the dataset record this exemplar was drawn from.
    pub source_id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub instruction: String,
    pub exemplars: Vec<Exemplar>,
    pub cot: bool,
}

impl PromptSpec {
    pub fn zero_shot(id: impl Into<String>, instruction: impl Into<String>) -> Self {
        PromptSpec {
            id: id.into(),
            instruction: instruction.into(),
            exemplars: Vec::new(),
            cot: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cot && self.exemplars.iter().any(|e| e.explanation.is_none()) {
            return Err(Error::usage(format!(
                "chain-of-thought prompt {} has an exemplar without explanation",
                self.id
            )));
        }
        Ok(())
    }

    /// The exemplar blocks followed by the final question.
    pub fn render_user(&self, question: &str) -> String {
        let mut out = String::new();
        for ex in &self.exemplars {
            out.push_str("Q: ");
            out.push_str(&ex.question);
            out.push_str("\nA: ");
            if self.cot {
                if let Some(expl) = &ex.explanation {
                    out.push_str(expl);
                    out.push(' ');
                }
            }
            out.push_str("The answer is ");
            out.push_str(&ex.answer);
            out.push_str(".\n\n");
        }
        out.push_str("Q: ");
        out.push_str(question);
        out.push_str("\nA:");
        out
    }

    /// Full single-string rendering.
    pub fn render(&self, question: &str) -> String {
        if self.instruction.is_empty() {
            self.render_user(question)
        } else {
            format!("{}\n\n{}", self.instruction, self.render_user(question))
        }
    }

    /// Everything except the final question; used as the prompt part of cache keys.
    pub fn preamble(&self) -> String {
        let full = self.render("");
        full.strip_suffix("Q: \nA:").unwrap_or(&full).to_string()
    }
}

fn exemplar(record: &DatasetRecord) -> Exemplar {
    let answer = match &record.task {
        TaskType::MultipleChoice { options } => {
            let label = record.truth.answer.canonical_text();
            match options.iter().find(|o| o.label == label) {
                Some(o) => format!("({}) {}", o.label, o.text),
                None => label,
            }
        }
        _ => record.truth.answer.canonical_text(),
    };
    Exemplar {
        source_id: record.id.clone(),
        question: record.prompt_text(),
        answer,
        explanation: record.truth.explanation.clone(),
    }
}

/// Exemplar indices per prompt: without replacement within a prompt,
/// independently across prompts.
fn draw_exemplars(pool_len: usize, n_prompts: usize, shots: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_prompts == 0 {
        return Err(Error::usage("n_prompts must be at least 1"));
    }
    if shots > pool_len {
        return Err(Error::usage(format!(
            "pool of {pool_len} cannot supply {shots} exemplars per prompt"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_prompts)
        .map(|_| sample_indices(&mut rng, pool_len, shots).into_vec())
        .collect())
}

pub fn build_fewshot_prompts(
    pool: &[DatasetRecord],
    n_prompts: usize,
    shots: usize,
    seed: u64,
) -> Result<Vec<PromptSpec>> {
    Ok(draw_exemplars(pool.len(), n_prompts, shots, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, picks)| PromptSpec {
            id: format!("fewshot-{i}"),
            instruction: DEFAULT_INSTRUCTION.to_string(),
            exemplars: picks.into_iter().map(|j| exemplar(&pool[j])).collect(),
            cot: false,
        })
        .collect())
}

/// As [`build_fewshot_prompts`], but exemplars carry their worked explanation.
pub fn build_cot_prompts(
    pool: &[DatasetRecord],
    n_prompts: usize,
    shots: usize,
    seed: u64,
) -> Result<Vec<PromptSpec>> {
    if let Some(r) = pool.iter().find(|r| r.truth.explanation.is_none()) {
        return Err(Error::usage(format!(
            "record {} has no explanation for a chain-of-thought exemplar",
            r.id
        )));
    }
    Ok(draw_exemplars(pool.len(), n_prompts, shots, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, picks)| PromptSpec {
            id: format!("cot-{i}"),
            instruction: DEFAULT_INSTRUCTION.to_string(),
            exemplars: picks.into_iter().map(|j| exemplar(&pool[j])).collect(),
            cot: true,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Entropy,
    Gini,
    Centroid,
}

impl Criterion {
    pub fn value(&self, report: &DiversityReport) -> Result<f64> {
        match self {
            Criterion::Entropy => Ok(report.entropy),
            Criterion::Gini => Ok(report.gini),
            Criterion::Centroid => report
                .centroid_distance
                .ok_or_else(|| Error::usage("centroid criterion requires an embedder")),
        }
    }
}

/// Everything needed to sample and score a batch.
#[derive(Clone, Copy)]
pub struct SamplingContext<'a> {
    pub provider: &'a dyn Provider,
    pub sampling: &'a SamplingConfig,
    pub diversity: &'a DiversityConfig,
    pub embedder: Option<&'a dyn Embedder>,
    pub normalizer: &'a Normalizer,
}

impl SamplingContext<'_> {
    pub fn report(&self, prompt: &PromptSpec, question_id: &str, question: &str, task: &TaskType) -> Result<DiversityReport> {
        let batch = sample_batch(
            self.provider,
            prompt,
            question_id,
            question,
            task,
            self.sampling,
            self.normalizer,
        )?;
        diversity_report(&batch, self.embedder, self.diversity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_prompt_id: String,
    pub chosen_answer: Answer,
    pub per_prompt: Vec<(String, DiversityReport)>,
    pub criterion: Criterion,
}

/// Index of the minimum criterion value; ties go to the lowest index.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    debug_assert!(values.iter().all(|v| values[best] <= *v));
    best
}

fn check_criterion(criterion: Criterion, ctx: &SamplingContext<'_>) -> Result<()> {
    if criterion == Criterion::Centroid && ctx.embedder.is_none() {
        return Err(Error::usage("centroid criterion requires an embedder"));
    }
    Ok(())
}

pub fn select_prompt(
    prompts: &[PromptSpec],
    question_id: &str,
    question: &str,
    task: &TaskType,
    ctx: &SamplingContext<'_>,
    criterion: Criterion,
) -> Result<SelectionResult> {
    if prompts.is_empty() {
        return Err(Error::usage("prompt selection needs at least one prompt"));
    }
    check_criterion(criterion, ctx)?;
    let per_prompt = prompts
        .iter()
        .map(|p| {
            p.validate()?;
            ctx.report(p, question_id, question, task)
                .map(|r| (p.id.clone(), r))
                .map_err(|e| Error::Prompt {
                    prompt_id: p.id.clone(),
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    choose(per_prompt, criterion)
}

fn choose(per_prompt: Vec<(String, DiversityReport)>, criterion: Criterion) -> Result<SelectionResult> {
    let values = per_prompt
        .iter()
        .map(|(_, r)| criterion.value(r))
        .collect::<Result<Vec<_>>>()?;
    let best = argmin(&values);
    assert!(
        values.iter().all(|v| values[best] <= *v),
        "chosen criterion value must be minimal"
    );
    Ok(SelectionResult {
        chosen_prompt_id: per_prompt[best].0.clone(),
        chosen_answer: per_prompt[best].1.majority_answer.clone(),
        per_prompt,
        criterion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFailure {
    pub prompt_id: String,
    pub failure_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub criterion: Criterion,
    pub questions: usize,
    /// Failure of each prompt used alone (self-consistency on that prompt).
    pub per_prompt: Vec<PromptFailure>,
    pub mean_individual_failure: f64,
    /// Entry `n - 1` is the failure of selection among the first `n` prompts.
    pub prefix_failure: Vec<f64>,
    pub selection_failure: f64,
}

impl SweepReport {
    /// CSV with columns `kind,index,prompt_id,failure_probability`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "index", "prompt_id", "failure_probability"])?;
        for (i, p) in self.per_prompt.iter().enumerate() {
            w.write_record(["prompt", &i.to_string(), &p.prompt_id, &p.failure_probability.to_string()])?;
        }
        for (i, f) in self.prefix_failure.iter().enumerate() {
            w.write_record(["prefix", &(i + 1).to_string(), "", &f.to_string()])?;
        }
        w.write_record(["mean_individual", "", "", &self.mean_individual_failure.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

/// Failure of selection restricted to each prefix of `prompts`, alongside
/// every prompt's individual failure rate.
pub fn selection_sweep(
    prompts: &[PromptSpec],
    questions: &[DatasetRecord],
    ctx: &SamplingContext<'_>,
    criterion: Criterion,
) -> Result<SweepReport> {
    if prompts.is_empty() {
        return Err(Error::usage("sweep needs at least one prompt"));
    }
    if questions.is_empty() {
        return Err(Error::usage("sweep needs at least one question"));
    }
    check_criterion(criterion, ctx)?;
    let n = prompts.len();
    let mut individual_fail = vec![0usize; n];
    let mut prefix_fail = vec![0usize; n];
    for q in questions {
        let text = q.prompt_text();
        let result = select_prompt(prompts, &q.id, &text, &q.task, ctx, criterion)?;
        let values = result
            .per_prompt
            .iter()
            .map(|(_, r)| criterion.value(r))
            .collect::<Result<Vec<_>>>()?;
        let correct: Vec<bool> = result
            .per_prompt
            .iter()
            .map(|(_, r)| grade(&r.majority_answer, &q.truth, &q.task))
            .collect();
        for (i, ok) in correct.iter().enumerate() {
            if !ok {
                individual_fail[i] += 1;
            }
        }
        let mut best = 0;
        for k in 0..n {
            if values[k] < values[best] {
                best = k;
            }
            if !correct[best] {
                prefix_fail[k] += 1;
            }
        }
    }
    let total = questions.len() as f64;
    let per_prompt: Vec<PromptFailure> = prompts
        .iter()
        .zip(&individual_fail)
        .map(|(p, &f)| PromptFailure {
            prompt_id: p.id.clone(),
            failure_probability: f as f64 / total,
        })
        .collect();
    let mean_individual_failure =
        per_prompt.iter().map(|p| p.failure_probability).sum::<f64>() / n as f64;
    let prefix_failure: Vec<f64> = prefix_fail.iter().map(|&f| f as f64 / total).collect();
    Ok(SweepReport {
        criterion,
        questions: questions.len(),
        per_prompt,
        mean_individual_failure,
        selection_failure: prefix_failure[n - 1],
        prefix_failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answers::GroundTruth;
    use crate::datasets::synthesize_multiple_choice;
    use crate::embedding::DeterministicEmbedder;
    use crate::measures::majority_vote;
    use crate::providers::{Simulator, SimulatorConfig};

    fn pool_with_explanations(n: usize) -> Vec<DatasetRecord> {
        (0..n)
            .map(|i| DatasetRecord {
                id: format!("p{i}"),
                question: format!("What is {i} + 1?"),
                task: TaskType::Numeric,
                truth: GroundTruth::new(Answer::from_tokens([(i + 1).to_string()]))
                    .with_explanation(format!("x = {i} + 1")),
            })
            .collect()
    }

    #[test]
    fn fewshot_shapes() {
        let pool = pool_with_explanations(40);
        let prompts = build_fewshot_prompts(&pool, 20, 30, 1).unwrap();
        assert_eq!(prompts.len(), 20);
        for p in &prompts {
            assert_eq!(p.exemplars.len(), 30);
            let ids: std::collections::HashSet<_> = p.exemplars.iter().map(|e| &e.source_id).collect();
            assert_eq!(ids.len(), 30);
        }
        assert_eq!(prompts, build_fewshot_prompts(&pool, 20, 30, 1).unwrap());

        let zero = build_fewshot_prompts(&pool, 1, 0, 1).unwrap();
        assert!(zero[0].exemplars.is_empty());
        assert!(zero[0].render("Q?").starts_with(DEFAULT_INSTRUCTION));

        assert!(matches!(build_fewshot_prompts(&pool, 1, 41, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn cot_shares_selection_but_renders_explanations() {
        let pool = pool_with_explanations(12);
        let few = build_fewshot_prompts(&pool, 3, 4, 9).unwrap();
        let cot = build_cot_prompts(&pool, 3, 4, 9).unwrap();
        for (f, c) in few.iter().zip(&cot) {
            let ids = |p: &PromptSpec| p.exemplars.iter().map(|e| e.source_id.clone()).collect::<Vec<_>>();
            assert_eq!(ids(f), ids(c));
            assert!(c.cot);
            assert_ne!(f.render("q"), c.render("q"));
        }
        let single = build_cot_prompts(&pool, 1, 1, 0).unwrap();
        let text = single[0].render("What is 9 + 1?");
        let expl = single[0].exemplars[0].explanation.clone().unwrap();
        assert!(text.contains(&format!("A: {expl} The answer is")));

        let mut missing = pool.clone();
        missing[3].truth.explanation = None;
        assert!(matches!(build_cot_prompts(&missing, 1, 1, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn preamble_excludes_question() {
        let pool = pool_with_explanations(3);
        let p = &build_fewshot_prompts(&pool, 1, 2, 0).unwrap()[0];
        assert_eq!(format!("{}Q: final\nA:", p.preamble()), p.render("final"));
    }

    fn sim_ctx_parts() -> (SamplingConfig, DiversityConfig, Normalizer) {
        (
            SamplingConfig { m: 20, max_concurrency: 1, ..Default::default() },
            DiversityConfig::default(),
            Normalizer::default(),
        )
    }

    #[test]
    fn single_prompt_equals_self_consistency() {
        let qs = synthesize_multiple_choice(5, 3).unwrap();
        let sim = Simulator::new(SimulatorConfig { correct_prob: 0.5, seed: 4, ..Default::default() })
            .unwrap()
            .with_records(&qs);
        let (s, d, n) = sim_ctx_parts();
        let ctx = SamplingContext { provider: &sim, sampling: &s, diversity: &d, embedder: None, normalizer: &n };
        let prompt = PromptSpec::zero_shot("only", DEFAULT_INSTRUCTION);
        for q in &qs {
            let text = q.prompt_text();
            let sel = select_prompt(std::slice::from_ref(&prompt), &q.id, &text, &q.task, &ctx, Criterion::Entropy).unwrap();
            let batch = sample_batch(&sim, &prompt, &q.id, &text, &q.task, &s, &n).unwrap();
            assert!(sel.chosen_answer.same_elements(&majority_vote(&batch).unwrap().0));
            assert_eq!(sel.chosen_prompt_id, "only");
        }
    }

    #[test]
    fn unanimous_prompt_wins_under_entropy() {
        let qs = synthesize_multiple_choice(1, 8).unwrap();
        let sim = Simulator::new(SimulatorConfig { correct_prob: 0.5, seed: 1, ..Default::default() })
            .unwrap()
            .with_records(&qs)
            .with_prompt_accuracy("split", 0.5)
            .with_prompt_accuracy("sure", 1.0);
        let (s, d, n) = sim_ctx_parts();
        let ctx = SamplingContext { provider: &sim, sampling: &s, diversity: &d, embedder: None, normalizer: &n };
        let prompts = [PromptSpec::zero_shot("split", ""), PromptSpec::zero_shot("sure", "")];
        let q = &qs[0];
        let sel = select_prompt(&prompts, &q.id, &q.prompt_text(), &q.task, &ctx, Criterion::Entropy).unwrap();
        assert_eq!(sel.chosen_prompt_id, "sure");
        assert_eq!(sel.per_prompt[1].1.entropy, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmin(&[0.3, 0.1, 0.1, 0.2]), 1);
        assert_eq!(argmin(&[0.0, 0.0]), 0);
    }

    #[test]
    fn centroid_without_embedder_is_usage_error() {
        let qs = synthesize_multiple_choice(1, 8).unwrap();
        let sim = Simulator::new(SimulatorConfig::default()).unwrap().with_records(&qs);
        let (s, d, n) = sim_ctx_parts();
        let ctx = SamplingContext { provider: &sim, sampling: &s, diversity: &d, embedder: None, normalizer: &n };
        let prompts = [PromptSpec::zero_shot("a", "")];
        let q = &qs[0];
        assert!(matches!(
            select_prompt(&prompts, &q.id, &q.prompt_text(), &q.task, &ctx, Criterion::Centroid),
            Err(Error::Usage(_))
        ));
        let emb = DeterministicEmbedder::new(8, 0);
        let ctx = SamplingContext { embedder: Some(&emb), ..ctx };
        assert!(select_prompt(&prompts, &q.id, &q.prompt_text(), &q.task, &ctx, Criterion::Centroid).is_ok());
    }

    fn mixed_sim(qs: &[DatasetRecord], probs: &[f64], seed: u64) -> (Simulator, Vec<PromptSpec>) {
        let mut sim = Simulator::new(SimulatorConfig { correct_prob: 0.5, seed, ..Default::default() })
            .unwrap()
            .with_records(qs);
        let mut prompts = Vec::new();
        for (i, &p) in probs.iter().enumerate() {
            let id = format!("p{i}");
            sim = sim.with_prompt_accuracy(&id, p);
            prompts.push(PromptSpec::zero_shot(id, DEFAULT_INSTRUCTION));
        }
        (sim, prompts)
    }

    #[test]
    fn selection_beats_worst_prompt() {
        let qs = synthesize_multiple_choice(200, 21).unwrap();
        let (sim, prompts) = mixed_sim(&qs, &[0.9, 0.5, 0.2], 3);
        let (s, d, n) = sim_ctx_parts();
        let ctx = SamplingContext { provider: &sim, sampling: &s, diversity: &d, embedder: None, normalizer: &n };
        let sweep = selection_sweep(&prompts, &qs, &ctx, Criterion::Entropy).unwrap();
        let worst = sweep.per_prompt.iter().map(|p| p.failure_probability).fold(0.0, f64::max);
        assert!(sweep.selection_failure <= worst);
        assert_eq!(sweep.prefix_failure[0], sweep.per_prompt[0].failure_probability);
        assert!(sweep.selection_failure <= sweep.mean_individual_failure);
    }

    #[test]
    fn equal_quality_sweep_is_flat() {
        // behaviorally identical prompts carry no selection signal
        let qs = synthesize_multiple_choice(300, 2).unwrap();
        let sim = Simulator::new(SimulatorConfig { correct_prob: 0.45, seed: 8, ..Default::default() })
            .unwrap()
            .with_records(&qs);
        let prompts = vec![PromptSpec::zero_shot("same", DEFAULT_INSTRUCTION); 4];
        let (s, d, n) = sim_ctx_parts();
        let ctx = SamplingContext { provider: &sim, sampling: &s, diversity: &d, embedder: None, normalizer: &n };
        let sweep = selection_sweep(&prompts, &qs, &ctx, Criterion::Gini).unwrap();
        let mean = sweep.mean_individual_failure;
        let band = 3.0 * (mean * (1.0 - mean) / 300.0).sqrt();
        for f in &sweep.prefix_failure {
            assert!((f - mean).abs() <= band, "prefix {f} vs mean {mean} (band {band})");
        }
    }

    #[test]
    fn independent_equal_quality_prompts_still_gain() {
        let qs = synthesize_multiple_choice(300, 2).unwrap();
        let (sim, prompts) = mixed_sim(&qs, &[0.45; 4], 8);
        let (s, d, n) = sim_ctx_parts();
        let ctx = SamplingContext { provider: &sim, sampling: &s, diversity: &d, embedder: None, normalizer: &n };
        let sweep = selection_sweep(&prompts, &qs, &ctx, Criterion::Gini).unwrap();
        assert!(sweep.selection_failure <= sweep.mean_individual_failure);
    }

    #[test]
    fn sweep_is_deterministic_and_prefix_minimum_is_monotone() {
        let qs = synthesize_multiple_choice(30, 5).unwrap();
        let (sim, prompts) = mixed_sim(&qs, &[0.3, 0.6, 0.9], 12);
        let (s, d, n) = sim_ctx_parts();
        let ctx = SamplingContext { provider: &sim, sampling: &s, diversity: &d, embedder: None, normalizer: &n };
        let a = selection_sweep(&prompts, &qs, &ctx, Criterion::Entropy).unwrap();
        let b = selection_sweep(&prompts, &qs, &ctx, Criterion::Entropy).unwrap();
        assert_eq!(a, b);
        let q = &qs[0];
        let sel = select_prompt(&prompts, &q.id, &q.prompt_text(), &q.task, &ctx, Criterion::Entropy).unwrap();
        let mut running = f64::INFINITY;
        for (_, r) in &sel.per_prompt {
            let next = running.min(r.entropy);
            assert!(next <= running);
            running = next;
        }
    }
}
