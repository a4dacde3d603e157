//! Python bindings for the diversity measures, the simulator and the
//! evaluation helpers.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use divproxy::analysis::{self, Direction, LabeledObservation};
use divproxy::answers::{self, GroundTruth, TaskType};
use divproxy::embedding::{self, DistanceMetric, EmbeddingVector, Embedder};
use divproxy::measures::{self, Answer, DiversityConfig, GiniVariant, SampleBatch};
use divproxy::predictor;
use divproxy::datasets::DatasetRecord;
use divproxy::providers::{self, SamplingConfig, SimulatorConfig};
use divproxy::selection::{PromptSpec, DEFAULT_INSTRUCTION};

create_exception!(pydivproxy, DivproxyError, PyException);

fn err(e: divproxy::Error) -> PyErr {
    DivproxyError::new_err(e.to_string())
}

fn batch(answers: Vec<Vec<String>>) -> PyResult<SampleBatch> {
    SampleBatch::from_answers(answers.into_iter().map(Answer::from_tokens).collect()).map_err(err)
}

fn tokens(a: &Answer) -> Vec<String> {
    a.elements.iter().map(|e| e.as_str().to_string()).collect()
}

fn task(kind: &str, options: Option<Vec<(String, String)>>) -> PyResult<TaskType> {
    match (kind, options) {
        ("multiple_choice", Some(opts)) => TaskType::multiple_choice(opts).map_err(err),
        ("multiple_choice", None) => Err(DivproxyError::new_err("multiple_choice needs options")),
        ("numeric", _) => Ok(TaskType::Numeric),
        ("text_concat", _) => Ok(TaskType::TextConcat),
        (other, _) => Err(DivproxyError::new_err(format!("unknown task kind {other:?}"))),
    }
}

fn metric(name: &str) -> PyResult<DistanceMetric> {
    match name {
        "euclidean" => Ok(DistanceMetric::Euclidean),
        "cosine" => Ok(DistanceMetric::Cosine),
        other => Err(DivproxyError::new_err(format!("unknown metric {other:?}"))),
    }
}

/// Fraction of answers containing each element.
#[pyfunction]
fn element_distribution(answers: Vec<Vec<String>>) -> PyResult<BTreeMap<String, f64>> {
    let dist = measures::element_distribution(&batch(answers)?).map_err(err)?;
    Ok(dist.probs.into_iter().map(|(e, p)| (e.as_str().to_string(), p)).collect())
}

/// Entropy of the element distribution, in nats.
#[pyfunction]
fn entropy(answers: Vec<Vec<String>>) -> PyResult<f64> {
    Ok(measures::entropy(&measures::element_distribution(&batch(answers)?).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (answers, normalized = false))]
fn gini(answers: Vec<Vec<String>>, normalized: bool) -> PyResult<f64> {
    let dist = measures::element_distribution(&batch(answers)?).map_err(err)?;
    let variant = if normalized { GiniVariant::Normalized } else { GiniVariant::Literal };
    Ok(measures::gini_with_variant(&dist, variant))
}

/// `(answer elements, share)` of the most frequent answer.
#[pyfunction]
fn majority_vote(answers: Vec<Vec<String>>) -> PyResult<(Vec<String>, f64)> {
    let (a, share) = measures::majority_vote(&batch(answers)?).map_err(err)?;
    Ok((tokens(&a), share))
}

#[pyfunction]
#[pyo3(signature = (vectors, metric_name = "euclidean"))]
fn mean_centroid_distance(vectors: Vec<Vec<f64>>, metric_name: &str) -> PyResult<f64> {
    let vs = vectors
        .into_iter()
        .map(EmbeddingVector::new)
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    embedding::mean_centroid_distance(&vs, metric(metric_name)?).map_err(err)
}

/// Extracted answer elements; `["<no_answer>"]` when nothing is found.
#[pyfunction]
#[pyo3(signature = (raw, kind, options = None))]
fn normalize(raw: &str, kind: &str, options: Option<Vec<(String, String)>>) -> PyResult<Vec<String>> {
    Ok(tokens(&answers::normalize(raw, &task(kind, options)?)))
}

#[pyfunction]
#[pyo3(signature = (answer, truth, kind, options = None))]
fn grade(answer: Vec<String>, truth: Vec<String>, kind: &str, options: Option<Vec<(String, String)>>) -> PyResult<bool> {
    Ok(answers::grade(
        &Answer::from_tokens(answer),
        &GroundTruth::new(Answer::from_tokens(truth)),
        &task(kind, options)?,
    ))
}

/// `(slope, intercept, r_squared)`.
#[pyfunction]
fn linear_fit(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let f = analysis::linear_fit(&points).map_err(err)?;
    Ok((f.slope, f.intercept, f.r_squared))
}

/// `[(threshold, failure_probability, support)]`.
#[pyfunction]
fn cumulative_curve(
    values: Vec<f64>,
    failed: Vec<bool>,
    direction: &str,
    min_bucket: usize,
) -> PyResult<Vec<(f64, f64, usize)>> {
    if values.len() != failed.len() {
        return Err(DivproxyError::new_err("values and failed differ in length"));
    }
    let dir = match direction {
        "cumulative_min" => Direction::CumulativeMin,
        "cumulative_max" => Direction::CumulativeMax,
        other => return Err(DivproxyError::new_err(format!("unknown direction {other:?}"))),
    };
    let obs: Vec<_> = values.into_iter().zip(failed).map(|(v, f)| LabeledObservation::new(v, f)).collect();
    let c = analysis::cumulative_curve(&obs, dir, min_bucket).map_err(err)?;
    Ok(c.points.iter().map(|p| (p.threshold, p.failure_probability, p.support)).collect())
}

type PrTuple = (f64, f64, Vec<(f64, f64, f64)>);

/// `(auprc, baseline, [(threshold, precision, recall)])`.
#[pyfunction]
fn pr_curve(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<PrTuple> {
    let c = predictor::pr_curve(&scores, &labels).map_err(err)?;
    Ok((c.auprc, c.baseline, c.points.iter().map(|p| (p.threshold, p.precision, p.recall)).collect()))
}

/// Hash-seeded pseudo-random embeddings, for tests and offline runs.
#[pyclass]
struct DeterministicEmbedder(embedding::DeterministicEmbedder);

#[pymethods]
impl DeterministicEmbedder {
    #[new]
    #[pyo3(signature = (dim, seed = 0))]
    fn new(dim: usize, seed: u64) -> Self {
        DeterministicEmbedder(embedding::DeterministicEmbedder::new(dim, seed))
    }

    fn embed(&self, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.0.embed(&texts).map_err(err)?.into_iter().map(Vec::from).collect())
    }
}

#[pyclass(get_all)]
struct DiversityReport {
    entropy: f64,
    gini: f64,
    centroid_distance: Option<f64>,
    majority_answer: Vec<String>,
    majority_share: f64,
}

#[pymethods]
impl DiversityReport {
    fn __repr__(&self) -> String {
        format!(
            "DiversityReport(entropy={}, gini={}, centroid_distance={:?}, majority_answer={:?}, majority_share={})",
            self.entropy, self.gini, self.centroid_distance, self.majority_answer, self.majority_share
        )
    }
}

/// Statistical stand-in for a question-answering model.
#[pyclass]
struct Simulator {
    cfg: SimulatorConfig,
}

#[pymethods]
impl Simulator {
    #[new]
    #[pyo3(signature = (correct_prob, distractor_count = 3, noanswer_prob = 0.0, seed = 0))]
    fn new(correct_prob: f64, distractor_count: usize, noanswer_prob: f64, seed: u64) -> PyResult<Self> {
        let cfg = SimulatorConfig { correct_prob, distractor_count, noanswer_prob, seed };
        cfg.validate().map_err(err)?;
        Ok(Simulator { cfg })
    }

    /// `m` raw responses to one question.
    #[pyo3(signature = (question, truth, kind, options = None, m = 20, temperature = 0.7))]
    fn sample(
        &self,
        question: &str,
        truth: Vec<String>,
        kind: &str,
        options: Option<Vec<(String, String)>>,
        m: usize,
        temperature: f64,
    ) -> PyResult<Vec<String>> {
        let (sim, text, _) = self.provider(question, truth, kind, options)?;
        let cfg = SamplingConfig { m, temperature, ..Default::default() };
        providers::sample(&sim, &PromptSpec::zero_shot("python", DEFAULT_INSTRUCTION), &text, &cfg).map_err(err)
    }

    /// Samples, normalizes and scores one question.
    #[pyo3(signature = (question, truth, kind, options = None, m = 20, temperature = 0.7, embedder = None))]
    #[allow(clippy::too_many_arguments)]
    fn measure(
        &self,
        question: &str,
        truth: Vec<String>,
        kind: &str,
        options: Option<Vec<(String, String)>>,
        m: usize,
        temperature: f64,
        embedder: Option<PyRef<'_, DeterministicEmbedder>>,
    ) -> PyResult<DiversityReport> {
        let (sim, text, task) = self.provider(question, truth, kind, options)?;
        let cfg = SamplingConfig { m, temperature, ..Default::default() };
        let prompt = PromptSpec::zero_shot("python", DEFAULT_INSTRUCTION);
        let b = providers::sample_batch(&sim, &prompt, "q", &text, &task, &cfg, &Default::default())
            .map_err(err)?;
        let emb = embedder.as_ref().map(|e| &e.0 as &dyn Embedder);
        let r = measures::diversity_report(&b, emb, &DiversityConfig::default()).map_err(err)?;
        Ok(DiversityReport {
            entropy: r.entropy,
            gini: r.gini,
            centroid_distance: r.centroid_distance,
            majority_answer: tokens(&r.majority_answer),
            majority_share: r.majority_share,
        })
    }
}

impl Simulator {
    /// The simulator with the question registered, the text to ask, and the task.
    fn provider(
        &self,
        question: &str,
        truth: Vec<String>,
        kind: &str,
        options: Option<Vec<(String, String)>>,
    ) -> PyResult<(providers::Simulator, String, TaskType)> {
        let task = task(kind, options)?;
        let record = DatasetRecord {
            id: "q".into(),
            question: question.into(),
            task: task.clone(),
            truth: GroundTruth::new(Answer::from_tokens(truth)),
        };
        let sim = providers::Simulator::new(self.cfg).map_err(err)?.with_records([&record]);
        Ok((sim, record.prompt_text(), task))
    }
}

#[pymodule]
fn pydivproxy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DivproxyError", m.py().get_type::<DivproxyError>())?;
    m.add_function(wrap_pyfunction!(element_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(gini, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(mean_centroid_distance, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(grade, m)?)?;
    m.add_function(wrap_pyfunction!(linear_fit, m)?)?;
    m.add_function(wrap_pyfunction!(cumulative_curve, m)?)?;
    m.add_function(wrap_pyfunction!(pr_curve, m)?)?;
    m.add_class::<DeterministicEmbedder>()?;
    m.add_class::<DiversityReport>()?;
    m.add_class::<Simulator>()?;
    Ok(())
}
