//! The `divproxy` command line.
//!
//! Every command writes its artifacts plus `manifest.json` into the output
//! directory. Exit codes: 0 success, 2 usage or configuration error,
//! 3 provider or transport failure, 4 data error.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{calibration_suite, Direction, Measure, MeasureRow};
use crate::answers::{grade, Normalizer};
use crate::datasets::{self, DatasetFormat, DatasetRecord};
use crate::embedding::{DeterministicEmbedder, Embedder, HttpEmbedder, HttpEmbedderConfig};
use crate::error::{Error, Result};
use crate::measures::{diversity_report, DiversityConfig};
use crate::predictor::{
    ablation_study, balance, evaluate, project, train_test_split, BalanceStrategy, Example, FeatureMask,
    FeatureVector, Mlp, MlpConfig,
};
use crate::providers::{
    sample_batch, CacheMode, ChatClient, ChatConfig, Provider, ReplayCache, SamplingConfig, Simulator,
    SimulatorConfig,
};
use crate::selection::{
    build_cot_prompts, build_fewshot_prompts, selection_sweep, Criterion, PromptSpec, SamplingContext,
    DEFAULT_INSTRUCTION,
};
use crate::transport::{RetryPolicy, API_KEY_ENV};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "divproxy", version, about = "Response diversity as a failure proxy for repeated LLM sampling")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Serve completions from the cache only; a miss is an error.
    #[arg(long, global = true)]
    pub replay_only: bool,
    /// JSONL record/replay cache; overrides the config file.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample every question and write diversity measures with grading.
    Measure(MeasureArgs),
    /// Cumulative failure-probability curves from measure outputs.
    Calibrate(CalibrateArgs),
    /// Few-shot prompt selection sweep over a test set.
    Select(SelectArgs),
    /// Train the failure predictor and run the feature ablation.
    TrainPredictor(TrainArgs),
    /// Write a synthetic dataset, optionally with simulated measure rows.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub format: DatasetFormat,
    /// Sampling temperatures; defaults to the configured one.
    #[arg(long, value_delimiter = ',')]
    pub temperatures: Vec<f64>,
    /// Use only the first N questions.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Measure outputs (`measures.jsonl`).
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub min_bucket: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub measures: Vec<Measure>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub directions: Vec<Direction>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Test questions.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Exemplar pool; must not share ids with the test questions.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, value_enum)]
    pub format: DatasetFormat,
    #[arg(long, default_value_t = 20)]
    pub n_prompts: usize,
    #[arg(long, default_value_t = 30)]
    pub shots: usize,
    #[arg(long, value_enum, default_value_t = Criterion::Entropy)]
    pub criterion: Criterion,
    /// Include exemplar explanations (chain of thought).
    #[arg(long)]
    pub cot: bool,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Feature masks such as `full`, `entropy+gini`, `centroid`; the first one
    /// is the model written to `model.json`.
    #[arg(long, value_delimiter = ',')]
    pub masks: Vec<String>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub balance: Option<BalanceStrategy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SyntheticKind {
    /// Last-letter concatenation.
    Ll,
    /// Four-option multiple choice.
    Mc,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub kind: SyntheticKind,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 2)]
    pub words_per_name: usize,
    /// Simulator accuracies; each value yields one block of measure rows.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Simulator {
        #[serde(default = "default_correct_prob")]
        correct_prob: f64,
        #[serde(default = "default_distractors")]
        distractor_count: usize,
        #[serde(default)]
        noanswer_prob: f64,
        #[serde(default)]
        cot_bonus: f64,
        /// Accuracy overrides keyed by prompt id.
        #[serde(default)]
        prompt_accuracy: BTreeMap<String, f64>,
    },
    Http {
        base_url: String,
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_correct_prob() -> f64 {
    0.7
}

fn default_distractors() -> usize {
    3
}

fn default_key_env() -> String {
    API_KEY_ENV.to_string()
}

fn default_timeout() -> u64 {
    60
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Simulator {
            correct_prob: default_correct_prob(),
            distractor_count: default_distractors(),
            noanswer_prob: 0.0,
            cot_bonus: 0.0,
            prompt_accuracy: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Deterministic {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        url: String,
        model: String,
        dim: usize,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default = "default_embed_concurrency")]
        max_concurrency: usize,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_dim() -> usize {
    64
}

fn default_embed_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub min_bucket: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { min_bucket: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub mlp: MlpConfig,
    pub test_fraction: f64,
    pub balance: BalanceStrategy,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            mlp: MlpConfig::default(),
            test_fraction: 0.3,
            balance: BalanceStrategy::Oversample,
        }
    }
}

/// The TOML run configuration. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub provider: ProviderConfig,
    pub sampling: SamplingConfig,
    pub embedder: Option<EmbedderConfig>,
    pub diversity: DiversityConfig,
    pub calibration: CalibrationConfig,
    pub predictor: PredictorConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.predictor.mlp.validate()?;
        if self.calibration.min_bucket == 0 {
            return Err(Error::usage("calibration.min_bucket must be at least 1"));
        }
        if let ProviderConfig::Simulator { correct_prob, distractor_count, noanswer_prob, prompt_accuracy, .. } =
            &self.provider
        {
            SimulatorConfig {
                correct_prob: *correct_prob,
                distractor_count: *distractor_count,
                noanswer_prob: *noanswer_prob,
                seed: self.seed,
            }
            .validate()?;
            if prompt_accuracy.values().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::usage("provider.prompt_accuracy values must lie in [0, 1]"));
            }
        }
        match &self.embedder {
            Some(EmbedderConfig::Deterministic { dim }) | Some(EmbedderConfig::Http { dim, .. }) if *dim == 0 => {
                Err(Error::usage("embedder.dim must be at least 1"))
            }
            Some(EmbedderConfig::Http { max_concurrency: 0, .. }) => {
                Err(Error::usage("embedder.max_concurrency must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut file = File::open(path)?;
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    replay_only: bool,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn manifest(&self, command: &str, inputs: &[&Path], outputs: &[&str]) -> Result<()> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputHash {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.write_json(
            "manifest.json",
            &Manifest {
                tool: "divproxy",
                version: VERSION,
                command,
                seed: self.cfg.seed,
                config: &self.cfg,
                inputs,
                outputs: outputs.iter().map(|s| s.to_string()).collect(),
            },
        )
    }

    fn api_key(env_name: &str) -> Result<String> {
        match std::env::var(env_name) {
            Ok(k) if !k.is_empty() => Ok(k),
            _ => Err(Error::usage(format!("environment variable {env_name} is not set"))),
        }
    }

    /// The configured provider behind the optional replay cache. `records`
    /// are the questions a simulator may be asked.
    fn provider(&self, records: &[&DatasetRecord]) -> Result<Box<dyn Provider>> {
        let base: Box<dyn Provider> = match &self.cfg.provider {
            ProviderConfig::Simulator { correct_prob, distractor_count, noanswer_prob, cot_bonus, prompt_accuracy } => {
                let mut sim = Simulator::new(SimulatorConfig {
                    correct_prob: *correct_prob,
                    distractor_count: *distractor_count,
                    noanswer_prob: *noanswer_prob,
                    seed: self.cfg.seed,
                })?
                .with_records(records.iter().copied())
                .with_cot_bonus(*cot_bonus);
                for (id, p) in prompt_accuracy {
                    sim = sim.with_prompt_accuracy(id.clone(), *p);
                }
                Box::new(sim)
            }
            ProviderConfig::Http { base_url, model, api_key_env, timeout_secs } => {
                // a replay-only run never reaches the endpoint
                let key = if self.replay_only { None } else { Some(Self::api_key(api_key_env)?) };
                Box::new(ChatClient::new(
                    &ChatConfig {
                        base_url: base_url.clone(),
                        model: model.clone(),
                        retry: self.cfg.sampling.retry,
                        timeout_secs: *timeout_secs,
                    },
                    key,
                ))
            }
        };
        match (&self.cfg.cache, self.replay_only) {
            (Some(path), replay) => {
                let mode = if replay { CacheMode::ReplayOnly } else { CacheMode::Record };
                Ok(Box::new(ReplayCache::open(base, path, mode)?))
            }
            (None, true) => Err(Error::usage("--replay-only needs a cache (--cache or config cache)")),
            (None, false) => Ok(base),
        }
    }

    fn embedder(&self) -> Result<Option<Box<dyn Embedder>>> {
        Ok(match &self.cfg.embedder {
            None => None,
            Some(EmbedderConfig::Deterministic { dim }) => Some(Box::new(DeterministicEmbedder::new(*dim, self.cfg.seed))),
            Some(EmbedderConfig::Http { url, model, dim, api_key_env, max_concurrency, timeout_secs }) => {
                Some(Box::new(HttpEmbedder::new(
                    HttpEmbedderConfig {
                        url: url.clone(),
                        model: model.clone(),
                        dim: *dim,
                        max_concurrency: *max_concurrency,
                        retry: RetryPolicy::default(),
                        timeout_secs: *timeout_secs,
                    },
                    Some(Self::api_key(api_key_env)?),
                )))
            }
        })
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    if let Some(cache) = &cli.cache {
        cfg.cache = Some(cache.clone());
    }
    cfg.validate()?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("divproxy-out"));
    let run = Run { cfg, out, replay_only: cli.replay_only };
    match &cli.command {
        Command::Measure(a) => cmd_measure(&run, a),
        Command::Calibrate(a) => cmd_calibrate(&run, a),
        Command::Select(a) => cmd_select(&run, a),
        Command::TrainPredictor(a) => cmd_train_predictor(&run, a),
        Command::Simulate(a) => cmd_simulate(&run, a),
    }
}

fn load_dataset(path: &Path, format: DatasetFormat, limit: Option<usize>) -> Result<Vec<DatasetRecord>> {
    if !path.exists() {
        return Err(Error::usage(format!("dataset {} does not exist", path.display())));
    }
    let mut records = datasets::load(path, format)?;
    if let Some(n) = limit {
        records.truncate(n);
    }
    Ok(records)
}

/// The single zero-shot prompt used by `measure` and `simulate`.
pub fn measure_prompt() -> PromptSpec {
    PromptSpec::zero_shot("zero-shot", DEFAULT_INSTRUCTION)
}

/// One graded row per (question, temperature), in dataset order.
pub fn measure_rows(
    records: &[DatasetRecord],
    temperatures: &[f64],
    provider: &dyn Provider,
    sampling: &SamplingConfig,
    diversity: &DiversityConfig,
    embedder: Option<&dyn Embedder>,
    prompt: &PromptSpec,
) -> Result<Vec<MeasureRow>> {
    let normalizer = Normalizer::default();
    let mut rows = Vec::with_capacity(records.len() * temperatures.len());
    for &t in temperatures {
        let sampling = SamplingConfig { temperature: t, ..*sampling };
        sampling.validate()?;
        for r in records {
            let batch = sample_batch(provider, prompt, &r.id, &r.prompt_text(), &r.task, &sampling, &normalizer)?;
            let report = diversity_report(&batch, embedder, diversity)?;
            rows.push(MeasureRow {
                question_id: r.id.clone(),
                prompt_id: prompt.id.clone(),
                temperature: t,
                entropy: report.entropy,
                gini: report.gini,
                centroid_distance: report.centroid_distance,
                majority_answer: report.majority_answer.canonical_text(),
                majority_share: report.majority_share,
                correct: grade(&report.majority_answer, &r.truth, &r.task),
            });
        }
    }
    Ok(rows)
}

pub fn write_rows(rows: &[MeasureRow], jsonl: impl Write, csv_out: impl Write) -> Result<()> {
    let mut j = BufWriter::new(jsonl);
    for r in rows {
        serde_json::to_writer(&mut j, r)?;
        j.write_all(b"\n")?;
    }
    j.flush()?;
    let mut w = csv::Writer::from_writer(csv_out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<MeasureRow>> {
    let file = File::open(path).map_err(|e| Error::usage(format!("cannot open {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

fn cmd_measure(run: &Run, a: &MeasureArgs) -> Result<()> {
    let records = load_dataset(&a.dataset, a.format, a.limit)?;
    let refs: Vec<&DatasetRecord> = records.iter().collect();
    let provider = run.provider(&refs)?;
    let embedder = run.embedder()?;
    let temperatures = if a.temperatures.is_empty() { vec![run.cfg.sampling.temperature] } else { a.temperatures.clone() };
    fs::create_dir_all(&run.out)?;
    let rows = measure_rows(
        &records,
        &temperatures,
        provider.as_ref(),
        &run.cfg.sampling,
        &run.cfg.diversity,
        embedder.as_deref(),
        &measure_prompt(),
    )?;
    write_rows(&rows, run.create("measures.jsonl")?, run.create("measures.csv")?)?;
    run.manifest("measure", &[&a.dataset], &["measures.jsonl", "measures.csv"])?;
    let accuracy = rows.iter().filter(|r| r.correct).count() as f64 / rows.len().max(1) as f64;
    eprintln!("measured {} rows, majority-vote accuracy {accuracy:.4}", rows.len());
    Ok(())
}

fn cmd_calibrate(run: &Run, a: &CalibrateArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.input {
        rows.extend(read_rows(p)?);
    }
    let min_bucket = a.min_bucket.unwrap_or(run.cfg.calibration.min_bucket);
    if min_bucket == 0 {
        return Err(Error::usage("--min-bucket must be at least 1"));
    }
    let measures = if a.measures.is_empty() { Measure::ALL.to_vec() } else { a.measures.clone() };
    let directions = if a.directions.is_empty() { Direction::BOTH.to_vec() } else { a.directions.clone() };
    let mut per_temp: BTreeMap<u64, usize> = BTreeMap::new();
    for r in &rows {
        *per_temp.entry(r.temperature.to_bits()).or_default() += 1;
    }
    if let Some((t, n)) = per_temp.iter().find(|(_, n)| **n < min_bucket) {
        return Err(Error::validation(format!(
            "{n} rows at temperature {} is fewer than the minimum bucket of {min_bucket}",
            f64::from_bits(*t)
        )));
    }
    if rows.is_empty() {
        return Err(Error::validation("no measure rows to calibrate"));
    }
    let report = calibration_suite(&rows, &measures, &directions, min_bucket)?;
    fs::create_dir_all(&run.out)?;
    report.write_csv(run.create("calibration.csv")?)?;
    run.write_json("calibration.json", &report.summary_json())?;
    let inputs: Vec<&Path> = a.input.iter().map(PathBuf::as_path).collect();
    run.manifest("calibrate", &inputs, &["calibration.csv", "calibration.json"])?;
    for c in &report.curves {
        if let Some(f) = c.curve.fit {
            eprintln!(
                "{} {} t={}: slope {:.4}, r2 {:.4}",
                c.curve.direction.name(),
                c.measure.name(),
                c.temperature,
                f.slope,
                f.r_squared
            );
        }
    }
    Ok(())
}

fn cmd_select(run: &Run, a: &SelectArgs) -> Result<()> {
    if a.criterion == Criterion::Centroid && run.cfg.embedder.is_none() {
        return Err(Error::usage("criterion centroid needs an [embedder] in the config"));
    }
    let test = load_dataset(&a.dataset, a.format, a.limit)?;
    let pool = load_dataset(&a.pool, a.format, None)?;
    let test_ids: HashSet<&str> = test.iter().map(|r| r.id.as_str()).collect();
    if let Some(r) = pool.iter().find(|r| test_ids.contains(r.id.as_str())) {
        return Err(Error::usage(format!("pool and test set share question id {}", r.id)));
    }
    let prompts = if a.cot {
        build_cot_prompts(&pool, a.n_prompts, a.shots, run.cfg.seed)?
    } else {
        build_fewshot_prompts(&pool, a.n_prompts, a.shots, run.cfg.seed)?
    };
    let refs: Vec<&DatasetRecord> = test.iter().collect();
    let provider = run.provider(&refs)?;
    let embedder = run.embedder()?;
    let normalizer = Normalizer::default();
    let ctx = SamplingContext {
        provider: provider.as_ref(),
        sampling: &run.cfg.sampling,
        diversity: &run.cfg.diversity,
        embedder: embedder.as_deref(),
        normalizer: &normalizer,
    };
    fs::create_dir_all(&run.out)?;
    let sweep = selection_sweep(&prompts, &test, &ctx, a.criterion)?;
    run.write_json("selection.json", &sweep)?;
    sweep.write_csv(run.create("selection.csv")?)?;
    run.write_json("prompts.json", &prompts)?;
    run.manifest("select", &[&a.dataset, &a.pool], &["selection.json", "selection.csv", "prompts.json"])?;
    eprintln!(
        "selection failure {:.4}, mean prompt failure {:.4}",
        sweep.selection_failure, sweep.mean_individual_failure
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model_mask: String,
    train_examples: usize,
    test_examples: usize,
    evaluation: &'a crate::predictor::Evaluation,
    precision_at_recall_0_2: f64,
}

fn cmd_train_predictor(run: &Run, a: &TrainArgs) -> Result<()> {
    let masks: Vec<FeatureMask> = if a.masks.is_empty() {
        vec![FeatureMask::FULL]
    } else {
        a.masks.iter().map(|m| m.parse()).collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    for p in &a.input {
        rows.extend(read_rows(p)?);
    }
    let has_centroid = rows.iter().all(|r| r.centroid_distance.is_some());
    if masks.iter().any(|m| m.centroid) && !has_centroid {
        return Err(Error::validation("a mask uses centroid distance but the input rows lack it"));
    }
    let full = FeatureMask { centroid: has_centroid, ..FeatureMask::FULL };
    let data: Vec<Example> = rows
        .iter()
        .map(|r| Ok(Example { features: FeatureVector::from_row(r, full)?, failed: !r.correct }))
        .collect::<Result<_>>()?;
    let failed = data.iter().filter(|e| e.failed).count();
    if failed == 0 || failed == data.len() {
        return Err(Error::validation("training data must contain both failed and correct questions"));
    }
    let pc = &run.cfg.predictor;
    let mlp = MlpConfig { seed: run.cfg.seed, ..pc.mlp };
    let strategy = a.balance.unwrap_or(pc.balance);
    let (train, test) = train_test_split(&data, a.test_fraction.unwrap_or(pc.test_fraction), run.cfg.seed)?;
    for (name, part) in [("train", &train), ("test", &test)] {
        let f = part.iter().filter(|e| e.failed).count();
        if f == 0 || f == part.len() {
            return Err(Error::validation(format!("{name} split contains a single class")));
        }
    }
    fs::create_dir_all(&run.out)?;

    let primary = masks[0];
    let tr = balance(&project(&train, primary)?, strategy, mlp.seed)?;
    let (model, training) = Mlp::train(&tr, &mlp)?;
    let (evaluation, curve) = evaluate(&model, &project(&test, primary)?)?;
    run.write_json("model.json", &model)?;
    curve.write_csv(run.create("pr.csv")?)?;
    run.write_json("training.json", &training)?;

    let rows_out = ablation_study(&train, &test, &masks, &mlp, strategy)?;
    let mut w = csv::Writer::from_writer(run.create("ablation.csv")?);
    w.write_record(["mask", "accuracy", "precision", "recall", "f1", "auprc", "prevalence"])?;
    for r in &rows_out {
        let e = &r.evaluation;
        w.write_record([
            r.mask.to_string(),
            e.accuracy.to_string(),
            e.precision.to_string(),
            e.recall.to_string(),
            e.f1.to_string(),
            e.auprc.to_string(),
            e.prevalence.to_string(),
        ])?;
    }
    w.flush()?;
    run.write_json(
        "metrics.json",
        &TrainSummary {
            model_mask: primary.to_string(),
            train_examples: train.len(),
            test_examples: test.len(),
            evaluation: &evaluation,
            precision_at_recall_0_2: curve.precision_at_recall(0.2),
        },
    )?;
    let inputs: Vec<&Path> = a.input.iter().map(PathBuf::as_path).collect();
    run.manifest(
        "train-predictor",
        &inputs,
        &["model.json", "pr.csv", "training.json", "ablation.csv", "metrics.json"],
    )?;
    eprintln!(
        "auprc {:.4} (prevalence {:.4}), f1 {:.4}",
        evaluation.auprc, evaluation.prevalence, evaluation.f1
    );
    Ok(())
}

fn cmd_simulate(run: &Run, a: &SimulateArgs) -> Result<()> {
    let (records, format) = match a.kind {
        SyntheticKind::Ll => (datasets::synthesize_ll(a.count, a.words_per_name, run.cfg.seed)?, DatasetFormat::LlJson),
        SyntheticKind::Mc => (datasets::synthesize_multiple_choice(a.count, run.cfg.seed)?, DatasetFormat::CsqaJson),
    };
    fs::create_dir_all(&run.out)?;
    let mut w = run.create("dataset.json")?;
    datasets::write(&records, format, &mut w)?;
    w.flush()?;
    let mut outputs = vec!["dataset.json"];
    if !a.grid.is_empty() {
        let ProviderConfig::Simulator { distractor_count, noanswer_prob, .. } = run.cfg.provider else {
            return Err(Error::usage("simulate --grid needs the simulator provider"));
        };
        let embedder = run.embedder()?;
        let mut rows = Vec::new();
        for &p in &a.grid {
            let sim = Simulator::new(SimulatorConfig {
                correct_prob: p,
                distractor_count,
                noanswer_prob,
                seed: run.cfg.seed,
            })?
            .with_records(&records);
            let prompt = PromptSpec::zero_shot(format!("sim-{p}"), DEFAULT_INSTRUCTION);
            rows.extend(measure_rows(
                &records,
                &[run.cfg.sampling.temperature],
                &sim,
                &run.cfg.sampling,
                &run.cfg.diversity,
                embedder.as_deref(),
                &prompt,
            )?);
        }
        write_rows(&rows, run.create("measures.jsonl")?, run.create("measures.csv")?)?;
        outputs.extend(["measures.jsonl", "measures.csv"]);
    }
    run.manifest("simulate", &[], &outputs)?;
    eprintln!("wrote {} records to {}", records.len(), run.out.display());
    Ok(())
}
