//! Cumulative failure-probability curves over a diversity measure, and
//! least-squares line fits to them.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One graded question as written by `divproxy measure`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRow {
    pub question_id: String,
    pub prompt_id: String,
    pub temperature: f64,
    pub entropy: f64,
    pub gini: f64,
    pub centroid_distance: Option<f64>,
    pub majority_answer: String,
    pub majority_share: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Entropy,
    Gini,
    Centroid,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::Entropy, Measure::Gini, Measure::Centroid];

    pub fn name(&self) -> &'static str {
        match self {
            Measure::Entropy => "entropy",
            Measure::Gini => "gini",
            Measure::Centroid => "centroid",
        }
    }

    pub fn of(&self, row: &MeasureRow) -> Option<f64> {
        match self {
            Measure::Entropy => Some(row.entropy),
            Measure::Gini => Some(row.gini),
            Measure::Centroid => row.centroid_distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledObservation {
    pub measure_value: f64,
    pub failed: bool,
    pub question_id: String,
    pub temperature: f64,
}

impl LabeledObservation {
    pub fn new(measure_value: f64, failed: bool) -> Self {
        LabeledObservation {
            measure_value,
            failed,
            question_id: String::new(),
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Observations with measure at or above a descending threshold.
    CumulativeMin,
    /// Observations with measure at or below an ascending threshold.
    CumulativeMax,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::CumulativeMin, Direction::CumulativeMax];

    pub fn name(&self) -> &'static str {
        match self {
            Direction::CumulativeMin => "cumulative_min",
            Direction::CumulativeMax => "cumulative_max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub failure_probability: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub direction: Direction,
    pub points: Vec<CurvePoint>,
    /// Absent when fewer than two points were emitted.
    pub fit: Option<LinearFit>,
}

/// Failure probability over a moving threshold.
///
/// Distinct measure values are visited in order (ascending for
/// `CumulativeMax`, descending for `CumulativeMin`); a point is emitted at
/// each value once the accumulated support reaches `min_bucket`. Values
/// passed before that are merged into the first emitted point.
pub fn cumulative_curve(
    obs: &[LabeledObservation],
    direction: Direction,
    min_bucket: usize,
) -> Result<CalibrationCurve> {
    if min_bucket == 0 {
        return Err(Error::usage("min_bucket must be at least 1"));
    }
    if obs.len() < min_bucket {
        return Err(Error::usage(format!(
            "{} observations is fewer than the minimum bucket of {min_bucket}",
            obs.len()
        )));
    }
    if let Some(o) = obs.iter().find(|o| !o.measure_value.is_finite()) {
        return Err(Error::validation(format!(
            "non-finite measure value for question {}",
            o.question_id
        )));
    }
    let mut sorted: Vec<(f64, bool)> = obs.iter().map(|o| (o.measure_value, o.failed)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if direction == Direction::CumulativeMin {
        sorted.reverse();
    }

    let mut points = Vec::new();
    let (mut support, mut failures) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            support += 1;
            failures += sorted[i].1 as usize;
            i += 1;
        }
        if support >= min_bucket {
            points.push(CurvePoint {
                threshold: t,
                failure_probability: failures as f64 / support as f64,
                support,
            });
        }
    }
    let fit = if points.len() >= 2 {
        let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.threshold, p.failure_probability)).collect();
        Some(linear_fit(&xy)?)
    } else {
        None
    };
    Ok(CalibrationCurve { direction, points, fit })
}

/// Ordinary least squares. Constant `y` gives slope 0 and `r_squared` 1.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::usage("linear fit needs at least two points"));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::usage("linear fit needs at least two distinct x values"));
    }
    if syy == 0.0 {
        return Ok(LinearFit { slope: 0.0, intercept: my, r_squared: 1.0 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    Ok(LinearFit {
        slope,
        intercept,
        r_squared: (1.0 - ss_res / syy).max(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCurve {
    pub measure: Measure,
    pub temperature: f64,
    pub curve: CalibrationCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub min_bucket: usize,
    pub curves: Vec<SuiteCurve>,
}

#[derive(Serialize)]
struct CurveSummary {
    direction: Direction,
    measure: Measure,
    temperature: f64,
    points: usize,
    global_failure_probability: Option<f64>,
    fit: Option<LinearFit>,
}

impl CalibrationReport {
    /// CSV with columns `direction,measure,temperature,threshold,failure_probability,support`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["direction", "measure", "temperature", "threshold", "failure_probability", "support"])?;
        for c in &self.curves {
            for p in &c.curve.points {
                w.write_record([
                    c.curve.direction.name(),
                    c.measure.name(),
                    &c.temperature.to_string(),
                    &p.threshold.to_string(),
                    &p.failure_probability.to_string(),
                    &p.support.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Fit parameters per curve.
    pub fn summary_json(&self) -> serde_json::Value {
        let curves: Vec<CurveSummary> = self
            .curves
            .iter()
            .map(|c| CurveSummary {
                direction: c.curve.direction,
                measure: c.measure,
                temperature: c.temperature,
                points: c.curve.points.len(),
                global_failure_probability: c.curve.points.last().map(|p| p.failure_probability),
                fit: c.curve.fit,
            })
            .collect();
        serde_json::json!({ "min_bucket": self.min_bucket, "curves": curves })
    }
}

/// One curve per (temperature, measure, direction) present in `rows`.
///
/// Temperatures are grouped exactly and reported ascending. A measure that is
/// missing from every row at some temperature (centroid distance without an
/// embedder) is skipped there.
pub fn calibration_suite(
    rows: &[MeasureRow],
    measures: &[Measure],
    directions: &[Direction],
    min_bucket: usize,
) -> Result<CalibrationReport> {
    let mut by_temp: BTreeMap<u64, Vec<&MeasureRow>> = BTreeMap::new();
    for r in rows {
        if !r.temperature.is_finite() || r.temperature < 0.0 {
            return Err(Error::validation(format!("bad temperature for {}", r.question_id)));
        }
        // non-negative floats order the same as their bit patterns
        by_temp.entry((r.temperature + 0.0).to_bits()).or_default().push(r);
    }
    let mut curves = Vec::new();
    for (bits, group) in &by_temp {
        let temperature = f64::from_bits(*bits);
        for &measure in measures {
            let obs: Vec<LabeledObservation> = group
                .iter()
                .filter_map(|r| {
                    measure.of(r).map(|v| LabeledObservation {
                        measure_value: v,
                        failed: !r.correct,
                        question_id: r.question_id.clone(),
                        temperature,
                    })
                })
                .collect();
            if obs.is_empty() {
                continue;
            }
            if obs.len() != group.len() {
                return Err(Error::validation(format!(
                    "{} is missing on some rows at temperature {temperature}",
                    measure.name()
                )));
            }
            for &direction in directions {
                curves.push(SuiteCurve {
                    measure,
                    temperature,
                    curve: cumulative_curve(&obs, direction, min_bucket)?,
                });
            }
        }
    }
    Ok(CalibrationReport { min_bucket, curves })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_blocks() -> Vec<LabeledObservation> {
        let mut obs = vec![LabeledObservation::new(0.0, false); 100];
        obs.extend(vec![LabeledObservation::new(1.0, true); 100]);
        obs
    }

    fn triples(c: &CalibrationCurve) -> Vec<(f64, f64, usize)> {
        c.points.iter().map(|p| (p.threshold, p.failure_probability, p.support)).collect()
    }

    #[test]
    fn hand_counted_curves() {
        let obs = two_blocks();
        let max = cumulative_curve(&obs, Direction::CumulativeMax, 100).unwrap();
        assert_eq!(triples(&max), [(0.0, 0.0, 100), (1.0, 0.5, 200)]);
        let min = cumulative_curve(&obs, Direction::CumulativeMin, 100).unwrap();
        assert_eq!(triples(&min), [(1.0, 1.0, 100), (0.0, 0.5, 200)]);
    }

    #[test]
    fn all_failed_is_flat_one() {
        let obs: Vec<_> = (0..50).map(|i| LabeledObservation::new(i as f64 / 7.0, true)).collect();
        for d in Direction::BOTH {
            let c = cumulative_curve(&obs, d, 10).unwrap();
            assert!(c.points.iter().all(|p| p.failure_probability == 1.0));
        }
    }

    #[test]
    fn merged_prefix_and_errors() {
        let obs: Vec<_> = (0..10).map(|i| LabeledObservation::new(i as f64, i % 3 == 0)).collect();
        let c = cumulative_curve(&obs, Direction::CumulativeMax, 4).unwrap();
        assert_eq!(c.points[0].threshold, 3.0);
        assert_eq!(c.points[0].support, 4);
        assert_eq!(c.points.len(), 7);
        assert!(matches!(cumulative_curve(&obs, Direction::CumulativeMax, 11), Err(Error::Usage(_))));
    }

    #[test]
    fn fit_examples() {
        let f = linear_fit(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0), (5.0, 11.0)]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);

        let f = linear_fit(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)]).unwrap();
        assert!(f.slope.abs() < 1e-15);
        assert!((f.intercept - 1.0 / 3.0).abs() < 1e-15);
        assert!(f.r_squared.abs() < 1e-15);

        let f = linear_fit(&[(0.0, 4.0), (3.0, 4.0)]).unwrap();
        assert_eq!((f.slope, f.intercept, f.r_squared), (0.0, 4.0, 1.0));

        assert!(matches!(linear_fit(&[(1.0, 0.0), (1.0, 2.0)]), Err(Error::Usage(_))));
        assert!(matches!(linear_fit(&[(1.0, 0.0)]), Err(Error::Usage(_))));
    }

    fn row(t: f64, e: f64, correct: bool) -> MeasureRow {
        MeasureRow {
            question_id: format!("q{e}"),
            prompt_id: "p".into(),
            temperature: t,
            entropy: e,
            gini: e / 2.0,
            centroid_distance: None,
            majority_answer: "A".into(),
            majority_share: 1.0,
            correct,
        }
    }

    #[test]
    fn suite_cardinality() {
        let rows: Vec<_> = (0..20).map(|i| row(0.7, i as f64, i < 10)).collect();
        let r = calibration_suite(&rows, &[Measure::Entropy, Measure::Gini], &Direction::BOTH, 5).unwrap();
        assert_eq!(r.curves.len(), 4);
        let r = calibration_suite(&rows, &[], &Direction::BOTH, 5).unwrap();
        assert!(r.curves.is_empty());
        // no embedder: centroid is skipped rather than failing
        let r = calibration_suite(&rows, &Measure::ALL, &Direction::BOTH, 5).unwrap();
        assert_eq!(r.curves.len(), 4);

        let mut two_temps = rows.clone();
        two_temps.extend((0..20).map(|i| row(0.3, i as f64, i < 5)));
        let r = calibration_suite(&two_temps, &[Measure::Entropy], &Direction::BOTH, 5).unwrap();
        assert_eq!(r.curves.len(), 4);
        assert_eq!(r.curves[0].temperature, 0.3);

        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("direction,measure,temperature,threshold,failure_probability,support\n"));
        assert_eq!(r.summary_json()["curves"].as_array().unwrap().len(), 4);
    }

    fn normal_equations(points: &[(f64, f64)]) -> (f64, f64) {
        // solve [n sx; sx sxx] [b; a] = [sy; sxy]
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        let det = n * sxx - sx * sx;
        let a = (n * sxy - sx * sy) / det;
        let b = (sxx * sy - sx * sxy) / det;
        (a, b)
    }

    fn obs_strategy() -> impl Strategy<Value = Vec<LabeledObservation>> {
        prop::collection::vec((0u8..12, any::<bool>()), 1..80).prop_map(|v| {
            v.into_iter()
                .map(|(m, f)| LabeledObservation::new(m as f64 / 4.0, f))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn fit_matches_normal_equations(pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30)) {
            let f = linear_fit(&pts).unwrap();
            let (a, b) = normal_equations(&pts);
            prop_assert!((f.slope - a).abs() <= 1e-10 * (1.0 + a.abs()));
            prop_assert!((f.intercept - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }

        #[test]
        fn r_squared_affine_invariant(
            pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let f = linear_fit(&pts).unwrap();
            let moved: Vec<_> = pts.iter().map(|p| (scale * p.0 + shift, p.1)).collect();
            let g = linear_fit(&moved).unwrap();
            prop_assert!((f.r_squared - g.r_squared).abs() < 1e-9);
            prop_assert!((g.slope * scale - f.slope).abs() < 1e-9 * (1.0 + f.slope.abs()));
        }

        #[test]
        fn curve_invariants(obs in obs_strategy(), bucket in 1usize..20) {
            prop_assume!(obs.len() >= bucket);
            let total_fail = obs.iter().filter(|o| o.failed).count() as f64 / obs.len() as f64;
            let mut ends = Vec::new();
            for d in Direction::BOTH {
                let c = cumulative_curve(&obs, d, bucket).unwrap();
                prop_assert!(!c.points.is_empty());
                for w in c.points.windows(2) {
                    prop_assert!(w[0].support < w[1].support);
                    match d {
                        Direction::CumulativeMax => prop_assert!(w[0].threshold < w[1].threshold),
                        Direction::CumulativeMin => prop_assert!(w[0].threshold > w[1].threshold),
                    }
                }
                for p in &c.points {
                    prop_assert!(p.support >= bucket);
                    prop_assert!((0.0..=1.0).contains(&p.failure_probability));
                }
                let last = c.points.last().unwrap();
                prop_assert_eq!(last.support, obs.len());
                ends.push(last.failure_probability);
            }
            prop_assert_eq!(ends[0], ends[1]);
            prop_assert_eq!(ends[0], total_fail);
        }
    }
}
