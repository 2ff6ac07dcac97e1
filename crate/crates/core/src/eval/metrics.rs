use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{SampleId, Verdict};

/// Confusion counts with Vulnerable as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Adds one prediction to the tally.
    pub fn record(&mut self, prediction: Verdict, truth: Verdict) {
        match (prediction, truth) {
            (Verdict::Vulnerable, Verdict::Vulnerable) => self.tp += 1,
            (Verdict::Vulnerable, Verdict::Clean) => self.fp += 1,
            (Verdict::Clean, Verdict::Clean) => self.tn += 1,
            (Verdict::Clean, Verdict::Vulnerable) => self.fn_ += 1,
        }
    }

    /// The same counts with Clean taken as the positive class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

/// Tallies predictions against truths over identical key sets.
pub fn confusion(
    predictions: &BTreeMap<SampleId, Verdict>,
    truths: &BTreeMap<SampleId, Verdict>,
) -> Result<ConfusionCounts> {
    let only_predictions: Vec<SampleId> = predictions
        .keys()
        .filter(|k| !truths.contains_key(k))
        .copied()
        .collect();
    let only_truths: Vec<SampleId> = truths
        .keys()
        .filter(|k| !predictions.contains_key(k))
        .copied()
        .collect();
    if !only_predictions.is_empty() || !only_truths.is_empty() {
        return Err(Error::KeyMismatch {
            only_predictions,
            only_truths,
        });
    }
    let mut counts = ConfusionCounts::default();
    for (id, &truth) in truths {
        counts.record(predictions[id], truth);
    }
    Ok(counts)
}

/// Which metrics hit a zero denominator and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degenerate {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub degenerate: Degenerate,
    pub counts: ConfusionCounts,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Harmonic mean of precision and recall; `None` when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let sum = precision + recall;
    (sum > 0.0).then(|| 2.0 * precision * recall / sum)
}

/// Precision, recall, F1 and accuracy. Zero denominators yield 0 with the
/// matching degenerate flag set.
pub fn metrics(counts: ConfusionCounts) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let (precision, dp) = ratio(counts.tp, counts.tp + counts.fp);
    let (recall, dr) = ratio(counts.tp, counts.tp + counts.fn_);
    let (f1, df) = match f1_score(precision, recall) {
        Some(f) if !dp && !dr => (f, false),
        _ => (0.0, true),
    };
    let (accuracy, _) = ratio(counts.tp + counts.tn, total);
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        accuracy,
        degenerate: Degenerate {
            precision: dp,
            recall: dr,
            f1: df,
        },
        counts,
    })
}

/// Convenience: confusion followed by metrics.
pub fn evaluate(
    predictions: &BTreeMap<SampleId, Verdict>,
    truths: &BTreeMap<SampleId, Verdict>,
) -> Result<MetricsReport> {
    metrics(confusion(predictions, truths)?)
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flag = |d: bool| if d { "*" } else { "" };
        write!(
            f,
            "acc {:.4}  prec {:.4}{}  recall {:.4}{}  f1 {:.4}{}  (tp {} fp {} tn {} fn {})",
            self.accuracy,
            self.precision,
            flag(self.degenerate.precision),
            self.recall,
            flag(self.degenerate.recall),
            self.f1,
            flag(self.degenerate.f1),
            self.counts.tp,
            self.counts.fp,
            self.counts.tn,
            self.counts.fn_,
        )
    }
}

/// Minimum acceptable values; unset fields are not checked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Thresholds {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    /// Describes every threshold the report misses.
    pub fn misses(&self, report: &MetricsReport) -> Vec<String> {
        [
            ("accuracy", self.accuracy, report.accuracy),
            ("precision", self.precision, report.precision),
            ("recall", self.recall, report.recall),
            ("f1", self.f1, report.f1),
        ]
        .into_iter()
        .filter_map(|(name, min, got)| {
            min.filter(|&m| got < m)
                .map(|m| format!("{name} {got:.4} below threshold {m:.4}"))
        })
        .collect()
    }
}
