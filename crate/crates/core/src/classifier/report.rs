// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Binary confusion counts with `true` as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_labels(y_true: &[bool], y_pred: &[bool]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::DimensionMismatch {
                expected: y_true.len(),
                got: y_pred.len(),
            });
        }
        let mut c = Confusion::default();
        for (&t, &p) in y_true.iter().zip(y_pred) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    #[serde(rename = "False")]
    pub negative: ClassMetrics,
    #[serde(rename = "True")]
    pub positive: ClassMetrics,
    pub accuracy: f64,
    pub macro_avg: ClassMetrics,
    pub weighted_avg: ClassMetrics,
    pub confusion: Confusion,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn metrics(hit: usize, false_alarm: usize, miss: usize) -> ClassMetrics {
    let precision = ratio(hit, hit + false_alarm);
    let recall = ratio(hit, hit + miss);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support: hit + miss,
    }
}

pub fn classification_report(y_true: &[bool], y_pred: &[bool]) -> Result<ClassReport> {
    if y_true.is_empty() {
        return Err(Error::EmptyInput);
    }
    let c = Confusion::from_labels(y_true, y_pred)?;
    Ok(report_from_confusion(c))
}

pub fn report_from_confusion(c: Confusion) -> ClassReport {
    let positive = metrics(c.tp, c.fp, c.fn_);
    let negative = metrics(c.tn, c.fn_, c.fp);
    let total = c.total();
    let avg = |w: [f64; 2]| {
        let s = w[0] + w[1];
        let mix = |a: f64, b: f64| if s > 0.0 { (w[0] * a + w[1] * b) / s } else { 0.0 };
        ClassMetrics {
            precision: mix(negative.precision, positive.precision),
            recall: mix(negative.recall, positive.recall),
            f1: mix(negative.f1, positive.f1),
            support: total,
        }
    };
    ClassReport {
        negative,
        positive,
        accuracy: ratio(c.tp + c.tn, total),
        macro_avg: avg([1.0, 1.0]),
        weighted_avg: avg([negative.support as f64, positive.support as f64]),
        confusion: c,
    }
}

impl ClassReport {
    /// Aligned text table: one row per class, then accuracy and the averages.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>14} {:>9} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1-score", "support");
        let _ = writeln!(s);
        for (name, m) in [("False", &self.negative), ("True", &self.positive)] {
            let _ = writeln!(
                s,
                "{:>14} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                name, m.precision, m.recall, m.f1, m.support
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:>14} {:>9} {:>9} {:>9.2} {:>9}",
            "accuracy",
            "",
            "",
            self.accuracy,
            self.confusion.total()
        );
        for (name, m) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            let _ = writeln!(
                s,
                "{:>14} {:>9.2} {:>9.2} {:>9.2} {:>9}",
                name, m.precision, m.recall, m.f1, m.support
            );
        }
        s
    }
}
