//! Classification metrics and the label-ratio threshold rule.

use serde::{Deserialize, Serialize};

use crate::encoders::RawNews;
use crate::error::{BmrError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Counts with "fake" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub fake: ClassMetrics,
    pub real: ClassMetrics,
    pub confusion: Confusion,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn class(tp: usize, fp: usize, fn_: usize) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics { precision, recall, f1 }
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(self) -> Metrics {
        Metrics {
            accuracy: ratio(self.tp + self.tn, self.total()),
            fake: class(self.tp, self.fp, self.fn_),
            real: class(self.tn, self.fn_, self.fp),
            confusion: self,
        }
    }
}

/// Scores `y_hat` against `labels` (1 = fake); predicts fake iff
/// `y_hat >= threshold`.
pub fn evaluate(y_hat: &[f64], labels: &[u8], threshold: f64) -> Metrics {
    assert_eq!(y_hat.len(), labels.len(), "one score per label");
    let mut c = Confusion::default();
    for (&p, &y) in y_hat.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c.metrics()
}

/// Fraction of real items rounded to the nearest 0.05.
pub fn threshold_from_counts(real: usize, fake: usize) -> Result<f64> {
    if real == 0 || fake == 0 {
        return Err(BmrError::Data(format!(
            "threshold needs both classes, got {real} real and {fake} fake"
        )));
    }
    let frac = real as f64 / (real + fake) as f64;
    Ok((frac * 20.0).round() / 20.0)
}

pub fn derive_threshold(train: &[RawNews]) -> Result<f64> {
    let fake = train.iter().filter(|n| n.label == Some(1)).count();
    let real = train.iter().filter(|n| n.label == Some(0)).count();
    threshold_from_counts(real, fake)
}
