//! Failure prediction from diversity features.

mod mlp;
mod pr;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mlp::{gradient_check, Mlp, MlpConfig, TrainingReport};
pub use pr::{pr_curve, PrCurve, PrPoint};

use crate::analysis::MeasureRow;
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::measures::{diversity_report, DiversityConfig, DiversityReport, SampleBatch};

/// Which of entropy, Gini and centroid distance enter the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask {
    pub entropy: bool,
    pub gini: bool,
    pub centroid: bool,
}

impl FeatureMask {
    pub const FULL: FeatureMask = FeatureMask { entropy: true, gini: true, centroid: true };

    pub fn len(&self) -> usize {
        self.entropy as usize + self.gini as usize + self.centroid as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(entropy, gini, centroid)` projected onto the mask, in that order.
    pub fn project(&self, entropy: f64, gini: f64, centroid: Option<f64>) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(self.len());
        if self.entropy {
            v.push(entropy);
        }
        if self.gini {
            v.push(gini);
        }
        if self.centroid {
            v.push(centroid.ok_or_else(|| Error::usage("centroid feature requested without an embedder"))?);
        }
        Ok(v)
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.entropy, "entropy"), (self.gini, "gini"), (self.centroid, "centroid")]
            .into_iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| n)
            .collect();
        f.write_str(&names.join("+"))
    }
}

/// Parses `entropy+gini`, `gini,centroid`, `full`.
impl FromStr for FeatureMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "full" {
            return Ok(FeatureMask::FULL);
        }
        let mut m = FeatureMask { entropy: false, gini: false, centroid: false };
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "entropy" => m.entropy = true,
                "gini" => m.gini = true,
                "centroid" => m.centroid = true,
                other => return Err(Error::usage(format!("unknown feature {other:?}"))),
            }
        }
        if m.is_empty() {
            return Err(Error::usage(format!("feature mask {s:?} selects nothing")));
        }
        Ok(m)
    }
}

/// Masked features. Excluded features are absent from `values`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub mask: FeatureMask,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn from_report(report: &DiversityReport, mask: FeatureMask) -> Result<Self> {
        Ok(FeatureVector {
            mask,
            values: mask.project(report.entropy, report.gini, report.centroid_distance)?,
        })
    }

    pub fn from_row(row: &MeasureRow, mask: FeatureMask) -> Result<Self> {
        Ok(FeatureVector {
            mask,
            values: mask.project(row.entropy, row.gini, row.centroid_distance)?,
        })
    }

    fn get(&self, slot: usize) -> Option<f64> {
        let flags = [self.mask.entropy, self.mask.gini, self.mask.centroid];
        if !flags[slot] {
            return None;
        }
        Some(self.values[flags[..slot].iter().filter(|f| **f).count()])
    }

    pub fn entropy(&self) -> Option<f64> {
        self.get(0)
    }

    pub fn gini(&self) -> Option<f64> {
        self.get(1)
    }

    pub fn centroid_distance(&self) -> Option<f64> {
        self.get(2)
    }
}

pub fn extract_features(
    batch: &SampleBatch,
    embedder: Option<&dyn Embedder>,
    mask: FeatureMask,
    diversity: &DiversityConfig,
) -> Result<FeatureVector> {
    if mask.centroid && embedder.is_none() {
        return Err(Error::usage("centroid feature requested without an embedder"));
    }
    let embedder = if mask.centroid { embedder } else { None };
    FeatureVector::from_report(&diversity_report(batch, embedder, diversity)?, mask)
}

/// A feature vector with its label; `failed` is the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: FeatureVector,
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BalanceStrategy {
    /// Duplicate randomly chosen minority examples.
    #[default]
    Oversample,
    /// Drop randomly chosen majority examples.
    Undersample,
}

/// Equalizes class counts. Input order is kept; oversampled duplicates are appended.
pub fn balance(data: &[Example], strategy: BalanceStrategy, seed: u64) -> Result<Vec<Example>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data[i].failed);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::usage("balancing needs both failed and correct examples"));
    }
    let (minority, mut majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match strategy {
        BalanceStrategy::Oversample => {
            let mut out: Vec<Example> = data.to_vec();
            for _ in minority.len()..majority.len() {
                out.push(data[minority[rng.random_range(0..minority.len())]].clone());
            }
            Ok(out)
        }
        BalanceStrategy::Undersample => {
            majority.shuffle(&mut rng);
            let mut keep = vec![true; data.len()];
            for &i in &majority[minority.len()..] {
                keep[i] = false;
            }
            Ok(data.iter().zip(keep).filter(|(_, k)| *k).map(|(e, _)| e.clone()).collect())
        }
    }
}

/// Seeded shuffle-and-split; `test_fraction` of the examples go to the second half.
pub fn train_test_split(data: &[Example], test_fraction: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::usage("test fraction must lie in (0, 1)"));
    }
    let mut shuffled = data.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((data.len() as f64) * test_fraction).round() as usize;
    let train = shuffled.split_off(n_test);
    Ok((train, shuffled))
}

/// Thresholded metrics at 0.5 plus AUPRC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auprc: f64,
    pub prevalence: f64,
}

pub fn evaluate(model: &Mlp, test: &[Example]) -> Result<(Evaluation, PrCurve)> {
    let scores = test.iter().map(|e| model.predict(&e.features.values)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = test.iter().map(|e| e.failed).collect();
    let curve = pr_curve(&scores, &labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (s, &y) in scores.iter().zip(&labels) {
        match (*s >= 0.5, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok((
        Evaluation {
            accuracy: ratio(tp + tn, test.len()),
            precision,
            recall,
            f1,
            auprc: curve.auprc,
            prevalence: curve.baseline,
        },
        curve,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: FeatureMask,
    pub evaluation: Evaluation,
}

/// Projects full-feature examples onto `mask`.
pub fn project(data: &[Example], mask: FeatureMask) -> Result<Vec<Example>> {
    data.iter()
        .map(|e| {
            let f = &e.features;
            let values = mask.project(
                f.entropy().ok_or_else(|| Error::usage("examples lack entropy"))?,
                f.gini().ok_or_else(|| Error::usage("examples lack gini"))?,
                f.centroid_distance(),
            )?;
            Ok(Example { features: FeatureVector { mask, values }, failed: e.failed })
        })
        .collect()
}

/// Trains and evaluates one model per mask on the same split. `train` is
/// balanced per mask with the training seed; `test` is left as is.
pub fn ablation_study(
    train: &[Example],
    test: &[Example],
    masks: &[FeatureMask],
    cfg: &MlpConfig,
    strategy: BalanceStrategy,
) -> Result<Vec<AblationRow>> {
    if masks.is_empty() {
        return Err(Error::usage("ablation needs at least one mask"));
    }
    let run = |mask: FeatureMask| -> Result<AblationRow> {
        let tr = balance(&project(train, mask)?, strategy, cfg.seed)?;
        let te = project(test, mask)?;
        let (model, _) = Mlp::train(&tr, cfg)?;
        let (evaluation, _) = evaluate(&model, &te)?;
        Ok(AblationRow { mask, evaluation })
    };
    std::thread::scope(|s| {
        let handles: Vec<_> = masks.iter().map(|&m| s.spawn(move || run(m))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    })
}
