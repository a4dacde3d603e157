//! Vector-based diversity: embed each answer, average the vectors into a
//! centroid, and report the mean distance of the answers from it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::measures::SampleBatch;
use crate::transport::{Gate, JsonClient, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::usage("embedding vector must have at least one component"));
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(Error::Degenerate("embedding has non-finite components".into()));
        }
        Ok(EmbeddingVector(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    /// `1 - cos(x, y)`, clamped at zero.
    Cosine,
}

impl DistanceMetric {
    pub fn distance(&self, x: &EmbeddingVector, y: &EmbeddingVector) -> Result<f64> {
        if x.dim() != y.dim() {
            return Err(Error::usage(format!(
                "dimension mismatch: {} vs {}",
                x.dim(),
                y.dim()
            )));
        }
        match self {
            DistanceMetric::Euclidean => Ok(x
                .0
                .iter()
                .zip(&y.0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()),
            DistanceMetric::Cosine => {
                let (nx, ny) = (x.norm(), y.norm());
                if nx == 0.0 || ny == 0.0 {
                    return Err(Error::Degenerate(
                        "cosine distance undefined for a zero vector".into(),
                    ));
                }
                let dot: f64 = x.0.iter().zip(&y.0).map(|(a, b)| a * b).sum();
                Ok((1.0 - dot / (nx * ny)).max(0.0))
            }
        }
    }
}

/// Which text of each sample is embedded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedTarget {
    /// The canonical rendering of the answer's element set.
    #[default]
    AnswerOnly,
    /// The full completion, reasoning included.
    ReasoningAndAnswer,
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// One vector per input text, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

pub fn embed_batch(
    embedder: &dyn Embedder,
    batch: &SampleBatch,
    target: EmbedTarget,
) -> Result<Vec<EmbeddingVector>> {
    if batch.is_empty() {
        return Err(Error::usage("cannot embed an empty batch"));
    }
    let texts: Vec<String> = batch
        .samples()
        .iter()
        .map(|a| match target {
            EmbedTarget::AnswerOnly => a.canonical_text(),
            EmbedTarget::ReasoningAndAnswer => a.raw_text.clone(),
        })
        .collect();
    let vectors = embedder.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(Error::Protocol(format!(
            "embedder returned {} vectors for {} texts",
            vectors.len(),
            texts.len()
        )));
    }
    check_dims(&vectors)?;
    Ok(vectors)
}

fn check_dims(vectors: &[EmbeddingVector]) -> Result<usize> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::usage("empty vector list"))?
        .dim();
    if let Some(v) = vectors.iter().find(|v| v.dim() != first) {
        return Err(Error::usage(format!(
            "vectors disagree on dimension: {first} vs {}",
            v.dim()
        )));
    }
    Ok(first)
}

/// Component-wise arithmetic mean.
///
/// Accumulated as offsets from the first vector, so a list of identical
/// vectors yields that vector exactly.
pub fn centroid(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let dim = check_dims(vectors)?;
    let n = vectors.len() as f64;
    let origin = &vectors[0].0;
    let mut offset = vec![0.0; dim];
    for v in &vectors[1..] {
        for ((s, c), o) in offset.iter_mut().zip(&v.0).zip(origin) {
            *s += c - o;
        }
    }
    Ok(EmbeddingVector(
        origin.iter().zip(offset).map(|(o, s)| o + s / n).collect(),
    ))
}

pub fn mean_centroid_distance(vectors: &[EmbeddingVector], metric: DistanceMetric) -> Result<f64> {
    let cent = centroid(vectors)?;
    let mut total = 0.0;
    for v in vectors {
        total += metric.distance(v, &cent)?;
    }
    Ok(total / vectors.len() as f64)
}

/// Hash-seeded pseudo-random embedder for hermetic tests and simulations.
///
/// Each text maps to `dim` components drawn uniformly from `[-1, 1]` by a
/// generator seeded with `sha256(seed || text)`.
#[derive(Debug, Clone)]
pub struct DeterministicEmbedder {
    dim: usize,
    seed: u64,
}

impl DeterministicEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        DeterministicEmbedder {
            dim: dim.max(1),
            seed,
        }
    }

    fn vector(&self, text: &str) -> EmbeddingVector {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        EmbeddingVector((0..self.dim).map(|_| rng.random_range(-1.0..=1.0)).collect())
    }
}

impl Embedder for DeterministicEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpEmbedderConfig {
    pub url: String,
    pub model: String,
    pub dim: usize,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_concurrency() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    60
}

/// Client for an OpenAI-embeddings-compatible endpoint with a per-run cache.
///
/// Texts already embedded in this run are served from memory; only the
/// remaining distinct texts are sent, in one request per call.
pub struct HttpEmbedder {
    cfg: HttpEmbedderConfig,
    api_key: Option<String>,
    client: JsonClient,
    gate: Gate,
    cache: RwLock<HashMap<String, EmbeddingVector>>,
    requests: AtomicUsize,
}

impl HttpEmbedder {
    pub fn new(cfg: HttpEmbedderConfig, api_key: Option<String>) -> Self {
        let client = JsonClient::new(cfg.retry, Duration::from_secs(cfg.timeout_secs));
        let gate = Gate::new(cfg.max_concurrency);
        HttpEmbedder {
            cfg,
            api_key,
            client,
            gate,
            cache: RwLock::new(HashMap::new()),
            requests: AtomicUsize::new(0),
        }
    }

    /// Number of HTTP requests issued so far.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn fetch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let _permit = self.gate.enter();
        self.requests.fetch_add(1, Ordering::SeqCst);
        let body = json!({ "input": texts, "model": self.cfg.model });
        let reply = self
            .client
            .post(&self.cfg.url, self.api_key.as_deref(), &body)?;
        parse_embeddings(&reply, texts.len(), self.cfg.dim)
    }
}

fn parse_embeddings(reply: &Value, expected: usize, dim: usize) -> Result<Vec<EmbeddingVector>> {
    let data = reply
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Protocol("embedding reply lacks a data array".into()))?;
    if data.len() != expected {
        return Err(Error::Protocol(format!(
            "embedding reply has {} entries for {expected} inputs",
            data.len()
        )));
    }
    data.iter()
        .map(|item| {
            let comps: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Protocol("entry lacks an embedding array".into()))?
                .iter()
                .map(|c| {
                    c.as_f64()
                        .ok_or_else(|| Error::Protocol("non-numeric embedding component".into()))
                })
                .collect::<Result<_>>()?;
            if comps.len() != dim {
                return Err(Error::Protocol(format!(
                    "embedding of dimension {} where {dim} was configured",
                    comps.len()
                )));
            }
            EmbeddingVector::new(comps).map_err(|e| Error::Protocol(e.to_string()))
        })
        .collect()
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let missing: Vec<String> = {
            let cache = self.cache.read().unwrap();
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !cache.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fetched = self.fetch(&missing)?;
            let mut cache = self.cache.write().unwrap();
            for (text, v) in missing.into_iter().zip(fetched) {
                cache.entry(text).or_insert(v);
            }
        }
        let cache = self.cache.read().unwrap();
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Answer;
    use proptest::prelude::*;

    fn v(c: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(c.to_vec()).unwrap()
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&[v(&[0., 0.]), v(&[2., 0.])]).unwrap(), v(&[1., 0.]));
        assert_eq!(centroid(&[v(&[3., -1.5])]).unwrap(), v(&[3., -1.5]));
        assert_eq!(centroid(&vec![v(&[1., 1.]); 3]).unwrap(), v(&[1., 1.]));
        assert!(matches!(centroid(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn mean_distance_examples() {
        let e = DistanceMetric::Euclidean;
        assert_eq!(mean_centroid_distance(&vec![v(&[0.5, 2.]); 4], e).unwrap(), 0.0);
        assert_eq!(mean_centroid_distance(&[v(&[0., 0.]), v(&[2., 0.])], e).unwrap(), 1.0);
        let cross = [v(&[1., 0.]), v(&[0., 1.]), v(&[-1., 0.]), v(&[0., -1.])];
        assert_eq!(mean_centroid_distance(&cross, e).unwrap(), 1.0);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let cross = [v(&[1., 0.]), v(&[-1., 0.])];
        assert!(matches!(
            mean_centroid_distance(&cross, DistanceMetric::Cosine),
            Err(Error::Degenerate(_))
        ));
        let d = DistanceMetric::Cosine
            .distance(&v(&[1., 0.]), &v(&[0., 3.]))
            .unwrap();
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_embedder_contract() {
        let emb = DeterministicEmbedder::new(8, 7);
        let out = emb
            .embed(&["alpha".into(), "alpha".into(), "beta".into()])
            .unwrap();
        assert_eq!(out[0], out[1]);
        assert_ne!(out[0], out[2]);
        for vec in &out {
            assert_eq!(vec.dim(), 8);
            assert!(vec.components().iter().all(|c| c.is_finite() && c.abs() <= 1.0));
        }
    }

    #[test]
    fn embed_batch_selects_target_text() {
        let emb = DeterministicEmbedder::new(4, 0);
        let mut a = Answer::from_tokens(["B"]);
        a.raw_text = "because reasons. The answer is (B)".into();
        let mut b = Answer::from_tokens(["B"]);
        b.raw_text = "obviously. The answer is (B)".into();
        let batch = SampleBatch::from_answers(vec![a, b]).unwrap();
        let ans = embed_batch(&emb, &batch, EmbedTarget::AnswerOnly).unwrap();
        assert_eq!(ans[0], ans[1]);
        let full = embed_batch(&emb, &batch, EmbedTarget::ReasoningAndAnswer).unwrap();
        assert_ne!(full[0], full[1]);
    }

    #[test]
    fn parse_rejects_dimension_mismatch() {
        let reply = json!({"data": [{"embedding": [1.0, 2.0]}, {"embedding": [1.0]}]});
        assert!(matches!(parse_embeddings(&reply, 2, 2), Err(Error::Protocol(_))));
    }

    fn brute_mean_distance(points: &[Vec<f64>]) -> f64 {
        let n = points.len();
        let d = points[0].len();
        let mut c = vec![0.0; d];
        for j in 0..d {
            for p in points {
                c[j] += p[j];
            }
            c[j] /= n as f64;
        }
        points
            .iter()
            .map(|p| p.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64
    }

    fn arb_points() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=4).prop_flat_map(|d| {
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), 1..=6)
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(points in arb_points()) {
            let vs: Vec<_> = points.iter().map(|p| v(p)).collect();
            let got = mean_centroid_distance(&vs, DistanceMetric::Euclidean).unwrap();
            prop_assert!((got - brute_mean_distance(&points)).abs() < 1e-12);
            prop_assert!(got >= 0.0);
        }

        #[test]
        fn translation_invariant(points in arb_points(), shift in -50.0f64..50.0) {
            let vs: Vec<_> = points.iter().map(|p| v(p)).collect();
            let moved: Vec<_> = points
                .iter()
                .map(|p| v(&p.iter().enumerate().map(|(j, c)| c + shift * (j as f64 + 1.0)).collect::<Vec<_>>()))
                .collect();
            let a = mean_centroid_distance(&vs, DistanceMetric::Euclidean).unwrap();
            let b = mean_centroid_distance(&moved, DistanceMetric::Euclidean).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn permutation_invariant(points in arb_points()) {
            let vs: Vec<_> = points.iter().map(|p| v(p)).collect();
            let mut rev = vs.clone();
            rev.reverse();
            let a = mean_centroid_distance(&vs, DistanceMetric::Euclidean).unwrap();
            let b = mean_centroid_distance(&rev, DistanceMetric::Euclidean).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn zero_iff_identical(points in arb_points()) {
            let vs: Vec<_> = points.iter().map(|p| v(p)).collect();
            let got = mean_centroid_distance(&vs, DistanceMetric::Euclidean).unwrap();
            let all_same = points.iter().all(|p| p == &points[0]);
            prop_assert_eq!(got == 0.0, all_same);
        }
    }
}
