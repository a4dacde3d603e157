use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall points by descending threshold, so recall is nondecreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Step-wise average precision over `points`.
    pub auprc: f64,
    /// Positive prevalence: the precision of guessing.
    pub baseline: f64,
}

impl PrCurve {
    /// Best precision among points with recall at least `recall`.
    pub fn precision_at_recall(&self, recall: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.recall >= recall)
            .map(|p| p.precision)
            .fold(0.0, f64::max)
    }

    /// CSV with columns `threshold,precision,recall`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "precision", "recall"])?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.precision.to_string(), p.recall.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A score at or above the threshold predicts the positive class.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<PrCurve> {
    if scores.len() != labels.len() {
        return Err(Error::usage("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("non-finite score"));
    }
    let positives = labels.iter().filter(|l| **l).count();
    if positives == 0 {
        return Err(Error::usage("precision-recall needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut auprc = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let precision = tp as f64 / seen as f64;
        let recall = tp as f64 / positives as f64;
        auprc += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint { threshold: t, precision, recall });
    }
    Ok(PrCurve {
        points,
        auprc,
        baseline: positives as f64 / labels.len() as f64,
    })
}
