//! Thresholding of reconstruction scores, confusion counts and the metric suite.

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::ingest::Label;

/// Width of the fallback margin above a degenerate score distribution.
pub const DEGENERATE_MARGIN: f64 = 1e-6;
pub const VALLEY_BINS: usize = 100;
pub const DISPLAY_DECIMALS: i32 = 4;

#[derive(Debug, Error, PartialEq)]
pub enum DetectorError {
    #[error("no scores to work with")]
    EmptyScores,
    #[error("{labels} labels but {verdicts} verdicts")]
    LengthMismatch { labels: usize, verdicts: usize },
    #[error("invalid threshold policy: {0}")]
    InvalidPolicy(String),
    #[error("non-finite score at position {0}")]
    NonFiniteScore(usize),
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    FixedValue { value: f64 },
    TrainQuantile { q: f64 },
    DensityValley,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::TrainQuantile { q: 0.995 }
    }
}

impl std::fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdPolicy::FixedValue { value } => write!(f, "fixed:{value}"),
            ThresholdPolicy::TrainQuantile { q } => write!(f, "quantile:{q}"),
            ThresholdPolicy::DensityValley => f.write_str("valley"),
        }
    }
}

impl std::str::FromStr for ThresholdPolicy {
    type Err = DetectorError;

    /// Accepts `fixed:<v>`, `quantile:<q>` and `valley`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DetectorError::InvalidPolicy(format!("{s:?} (expected fixed:<v>, quantile:<q> or valley)"));
        let policy = match s.trim().split_once(':') {
            Some(("fixed", v)) => ThresholdPolicy::FixedValue {
                value: v.parse().map_err(|_| bad())?,
            },
            Some(("quantile", q)) => ThresholdPolicy::TrainQuantile {
                q: q.parse().map_err(|_| bad())?,
            },
            None if s.trim() == "valley" => ThresholdPolicy::DensityValley,
            _ => return Err(bad()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<(), DetectorError> {
        match *self {
            ThresholdPolicy::FixedValue { value } if !(value.is_finite() && value > 0.0) => Err(
                DetectorError::InvalidPolicy(format!("fixed threshold must be positive and finite, got {value}")),
            ),
            ThresholdPolicy::TrainQuantile { q } if !(q > 0.0 && q < 1.0) => Err(DetectorError::InvalidPolicy(
                format!("quantile must lie in (0,1), got {q}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResolution {
    pub policy: ThresholdPolicy,
    pub value: f64,
    /// Set when the policy could not be applied as stated.
    pub fallback: Option<String>,
}

fn check_scores(scores: &[f64]) -> Result<(), DetectorError> {
    if scores.is_empty() {
        return Err(DetectorError::EmptyScores);
    }
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(DetectorError::NonFiniteScore(i)),
        None => Ok(()),
    }
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolation quantile of a sorted sample.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn resolve_threshold(train_scores: &[f64], policy: ThresholdPolicy) -> Result<ThresholdResolution, DetectorError> {
    policy.validate()?;
    if let ThresholdPolicy::FixedValue { value } = policy {
        return Ok(ThresholdResolution {
            policy,
            value,
            fallback: None,
        });
    }
    check_scores(train_scores)?;
    let s = sorted(train_scores);
    let (min, max) = (s[0], s[s.len() - 1]);
    let fallback = |reason: &str| ThresholdResolution {
        policy,
        value: above(max),
        fallback: Some(format!("{reason}; using max score + {DEGENERATE_MARGIN}")),
    };
    if min == max {
        return Ok(fallback("degenerate distribution (all scores equal)"));
    }
    let resolved = match policy {
        ThresholdPolicy::TrainQuantile { q } => {
            let v = quantile(&s, q);
            let tied = s.iter().filter(|&&x| x == v).count();
            if tied >= 2 {
                // Scores equal to the threshold are malicious, so a cut on a
                // tied score would flag the whole tie block.
                return Ok(ThresholdResolution {
                    policy,
                    value: above(v),
                    fallback: Some(format!(
                        "quantile falls on a score shared by {tied} training samples; using that score + {DEGENERATE_MARGIN}"
                    )),
                });
            }
            v
        }
        ThresholdPolicy::DensityValley => match density_valley(&s) {
            Some(v) => v,
            None => return Ok(fallback("no bins above the primary mode")),
        },
        ThresholdPolicy::FixedValue { .. } => unreachable!(),
    };
    if resolved > 0.0 {
        Ok(ThresholdResolution {
            policy,
            value: resolved,
            fallback: None,
        })
    } else {
        Ok(fallback("resolved threshold not positive"))
    }
}

/// `v + DEGENERATE_MARGIN`, or the next representable value if the margin vanishes.
fn above(v: f64) -> f64 {
    let w = v + DEGENERATE_MARGIN;
    if w > v {
        w
    } else {
        v.next_up()
    }
}

/// Center of the longest run of minimum-density bins above the primary mode.
fn density_valley(scores: &[f64]) -> Option<f64> {
    let h = histogram(scores, VALLEY_BINS).ok()?;
    let d = &h.densities;
    let mode = (0..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best });
    let tail = &d[mode + 1..];
    let low = tail.iter().copied().fold(f64::INFINITY, f64::min);
    if !low.is_finite() {
        return None;
    }
    let (mut best, mut run_start) = ((0, 0), None);
    for (i, &v) in tail.iter().chain(std::iter::once(&f64::INFINITY)).enumerate() {
        match (v == low, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(start)) => {
                if i - start > best.1 - best.0 {
                    best = (start, i);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    let lo = h.bin_edges[mode + 1 + best.0];
    let hi = h.bin_edges[mode + 1 + best.1];
    Some(0.5 * (lo + hi))
}

/// Scores at or above the threshold are malicious.
pub fn classify(score: f64, threshold: f64) -> Label {
    if score < threshold {
        Label::Normal
    } else {
        Label::Malicious
    }
}

/// Counts with malicious as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(labels: &[Label], verdicts: &[Label]) -> Result<ConfusionMatrix, DetectorError> {
    if labels.len() != verdicts.len() {
        return Err(DetectorError::LengthMismatch {
            labels: labels.len(),
            verdicts: verdicts.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (l, v) in labels.iter().zip(verdicts) {
        match (l, v) {
            (Label::Malicious, Label::Malicious) => cm.tp += 1,
            (Label::Normal, Label::Normal) => cm.tn += 1,
            (Label::Normal, Label::Malicious) => cm.fp += 1,
            (Label::Malicious, Label::Normal) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricValue {
    Defined(f64),
    Undefined { reason: String },
}

impl MetricValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Defined(v) => Some(*v),
            MetricValue::Undefined { .. } => None,
        }
    }

    fn ratio(num: u64, den: u64, reason: &str) -> Self {
        if den == 0 {
            MetricValue::Undefined { reason: reason.into() }
        } else {
            MetricValue::Defined(num as f64 / den as f64)
        }
    }

    /// Value cut (not rounded) to `decimals` places, the presentation used for reports.
    pub fn display(&self, decimals: i32) -> String {
        match self {
            MetricValue::Defined(v) => format!("{:.*}", decimals as usize, truncate_decimals(*v, decimals)),
            MetricValue::Undefined { reason } => format!("undefined ({reason})"),
        }
    }
}

/// Truncates toward zero at `decimals` places, tolerating binary representation error.
pub fn truncate_decimals(x: f64, decimals: i32) -> f64 {
    let k = 10f64.powi(decimals);
    (x * k + 1e-9).floor() / k
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: MetricValue,
    pub recall: MetricValue,
    pub specificity: MetricValue,
    pub precision: MetricValue,
    pub fpr: MetricValue,
    pub f1: MetricValue,
}

pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let recall = MetricValue::ratio(cm.tp, cm.tp + cm.fn_, "no actual malicious requests");
    let precision = MetricValue::ratio(cm.tp, cm.tp + cm.fp, "no predicted malicious requests");
    let f1 = match (precision.value(), recall.value()) {
        (Some(p), Some(r)) if p + r > 0.0 => MetricValue::Defined(2.0 * (p * r) / (p + r)),
        (Some(_), Some(_)) => MetricValue::Defined(0.0),
        _ => MetricValue::Undefined {
            reason: "precision or recall undefined".into(),
        },
    };
    MetricsReport {
        confusion: *cm,
        accuracy: MetricValue::ratio(cm.tp + cm.tn, cm.total(), "empty evaluation"),
        recall,
        specificity: MetricValue::ratio(cm.tn, cm.tn + cm.fp, "no actual normal requests"),
        precision,
        fpr: MetricValue::ratio(cm.fp, cm.fp + cm.tn, "no actual normal requests"),
        f1,
    }
}

impl MetricsReport {
    pub fn entries(&self) -> [(&'static str, &MetricValue); 6] {
        [
            ("accuracy", &self.accuracy),
            ("recall", &self.recall),
            ("specificity", &self.specificity),
            ("precision", &self.precision),
            ("fpr", &self.fpr),
            ("f1", &self.f1),
        ]
    }

    /// Flat `key=value` lines: counts, display values and `<metric>_full` values.
    pub fn to_key_value(&self) -> String {
        let c = &self.confusion;
        let mut out = format!("tp={}\ntn={}\nfp={}\nfn={}\n", c.tp, c.tn, c.fp, c.fn_);
        for (name, m) in self.entries() {
            out.push_str(&format!("{name}={}\n", m.display(DISPLAY_DECIMALS)));
            if let Some(v) = m.value() {
                out.push_str(&format!("{name}_full={v}\n"));
            }
        }
        out.push_str(&format!(
            "display_note=values cut to {DISPLAY_DECIMALS} decimals; *_full fields are exact\n"
        ));
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut metrics = serde_json::Map::new();
        for (name, m) in self.entries() {
            let entry = match m {
                MetricValue::Defined(v) => json!({
                    "rounded": truncate_decimals(*v, DISPLAY_DECIMALS),
                    "full": v,
                }),
                MetricValue::Undefined { reason } => json!({ "undefined": reason }),
            };
            metrics.insert(name.to_string(), entry);
        }
        let c = &self.confusion;
        json!({
            "confusion": { "tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn_, "total": c.total() },
            "metrics": metrics,
            "display_decimals": DISPLAY_DECIMALS,
            "display_mode": "truncate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub bin_edges: Vec<f64>,
    pub densities: Vec<f64>,
    pub n_samples: usize,
}

/// Equal-width, density-normalized histogram over `[min, max]`; a constant
/// sample occupies the first bin of a unit-width range.
pub fn histogram(scores: &[f64], bins: usize) -> Result<ScoreHistogram, DetectorError> {
    if bins < 2 {
        return Err(DetectorError::TooFewBins(bins));
    }
    check_scores(scores)?;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let width = span / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { min + span } else { min + width * i as f64 })
        .collect();
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let i = (((s - min) / width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = scores.len() as f64;
    let densities = counts
        .iter()
        .zip(bin_edges.windows(2))
        .map(|(&c, e)| c as f64 / (n * (e[1] - e[0])))
        .collect();
    Ok(ScoreHistogram {
        bin_edges,
        densities,
        n_samples: scores.len(),
    })
}

impl ScoreHistogram {
    /// `bin_lo,bin_hi,density` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,density\n");
        for (e, d) in self.bin_edges.windows(2).zip(&self.densities) {
            out.push_str(&format!("{},{},{}\n", e[0], e[1], d));
        }
        out
    }

    pub fn integral(&self) -> f64 {
        self.bin_edges
            .windows(2)
            .zip(&self.densities)
            .map(|(e, d)| (e[1] - e[0]) * d)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRequest {
    pub request_id: String,
    pub mae: f64,
    pub label: Option<Label>,
    pub verdict: Label,
}

/// `request_id,mae,label,verdict`; `label` is empty for unlabeled input.
pub fn scores_csv(rows: &[ScoredRequest]) -> String {
    let mut out = String::from("request_id,mae,label,verdict\n");
    for r in rows {
        let label = r.label.map(|l| l.as_str()).unwrap_or("");
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.request_id,
            r.mae,
            label,
            r.verdict.as_str()
        ));
    }
    out
}

/// Scores, verdicts and, for labeled input, the confusion-derived metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub threshold: ThresholdResolution,
    pub scored: Vec<ScoredRequest>,
    pub metrics: Option<MetricsReport>,
}

impl DetectionReport {
    pub fn new(
        threshold: ThresholdResolution,
        ids: Vec<String>,
        scores: &[f64],
        labels: Option<&[Label]>,
    ) -> Result<Self, DetectorError> {
        if ids.len() != scores.len() {
            return Err(DetectorError::LengthMismatch {
                labels: ids.len(),
                verdicts: scores.len(),
            });
        }
        if let Some(l) = labels {
            if l.len() != scores.len() {
                return Err(DetectorError::LengthMismatch {
                    labels: l.len(),
                    verdicts: scores.len(),
                });
            }
        }
        let scored: Vec<ScoredRequest> = ids
            .into_iter()
            .zip(scores)
            .enumerate()
            .map(|(i, (request_id, &mae))| ScoredRequest {
                request_id,
                mae,
                label: labels.map(|l| l[i]),
                verdict: classify(mae, threshold.value),
            })
            .collect();
        let metrics = match labels {
            Some(l) => {
                let verdicts: Vec<Label> = scored.iter().map(|r| r.verdict).collect();
                Some(metrics(&confusion(l, &verdicts)?))
            }
            None => None,
        };
        Ok(Self {
            threshold,
            scored,
            metrics,
        })
    }
}
