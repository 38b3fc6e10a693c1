//! Confusion matrices, per-class and support-weighted metrics, and table
//! rendering.

mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{ClassLabel, NUM_CLASSES};

pub use render::{render_tables, round2, ComparisonRow, RenderedTables, ReportSet, BASELINE_ROWS};

/// Rows are true labels, columns predicted labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; NUM_CLASSES]; NUM_CLASSES]);

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.0[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.0.iter().map(|row| row[class]).sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.0[c][c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.0.iter_mut().zip(&other.0) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }
}

pub fn confusion_matrix(y_true: &[ClassLabel], y_pred: &[ClassLabel]) -> Result<ConfusionMatrix> {
    if y_true.is_empty() {
        return Err(Error::EmptyInput);
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch(format!("{} truths vs {} predictions", y_true.len(), y_pred.len())));
    }
    let mut m = ConfusionMatrix::default();
    for (t, p) in y_true.iter().zip(y_pred) {
        m.0[t.index()][p.index()] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub weighted: ClassMetrics,
    pub accuracy: f64,
    pub matrix: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Support-weighted mean of per-class metrics.
pub fn weighted_average(per_class: &[ClassMetrics]) -> ClassMetrics {
    let total: u64 = per_class.iter().map(|m| m.support).sum();
    let avg = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
        }
    };
    ClassMetrics { precision: avg(|m| m.precision), recall: avg(|m| m.recall), f1: avg(|m| m.f1), support: total }
}

/// Per-class precision, recall and F1 with zero-division mapped to 0, and
/// their support-weighted averages.
pub fn classification_report(m: &ConfusionMatrix) -> Result<ClassificationReport> {
    if m.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let per_class: [ClassMetrics; NUM_CLASSES] = std::array::from_fn(|c| {
        let tp = m.0[c][c];
        let precision = ratio(tp, m.predicted(c));
        let recall = ratio(tp, m.support(c));
        ClassMetrics { precision, recall, f1: harmonic(precision, recall), support: m.support(c) }
    });
    Ok(ClassificationReport { weighted: weighted_average(&per_class), per_class, accuracy: m.accuracy(), matrix: *m })
}
