use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ClassMetrics, ClassificationReport};
use crate::ingest::ClassLabel;

/// A named report, e.g. one model on one fold or the pooled ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub name: String,
    pub report: ClassificationReport,
}

/// One line of the method comparison table, already formatted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub accuracy: String,
    pub precision: String,
    pub recall: String,
    pub f1: String,
}

/// Reference GLCM baseline, shown as-is and never recomputed.
pub const BASELINE_ROWS: [(&str, &str, &str, &str, &str); 1] = [("GLCM", "75.71%", "63.84%", "100%", "77.92%")];

const DISCREPANCY_NOTE: &str = "Note: reference precision for the ensemble is quoted as both 93% and 94%. \
Values above are computed from confusion matrices; full precision is kept in the CSV output.";

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedTables {
    pub text: String,
    pub csv: String,
    pub comparison: Vec<ComparisonRow>,
    pub json: serde_json::Value,
}

/// Half-up rounding to two decimals. The tiny bias absorbs binary
/// representation error at exact halves such as 0.125.
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5 + 1e-9).floor() / 100.0
}

fn cell(x: f64) -> String {
    format!("{:.2}", round2(x))
}

fn percent_whole(x: f64) -> String {
    format!("{:.0}%", round2(x) * 100.0)
}

fn percent_hundredths(x: f64) -> String {
    format!("{:.2}%", (x * 10000.0 + 0.5 + 1e-9).floor() / 100.0)
}

fn rows(report: &ClassificationReport) -> Vec<(String, ClassMetrics)> {
    ClassLabel::ALL
        .iter()
        .map(|c| (c.display_name().to_string(), report.per_class[c.index()]))
        .chain(std::iter::once(("avg/total".to_string(), report.weighted)))
        .collect()
}

/// Per-report tables in class order followed by avg/total, a comparison
/// table with the static baselines, a CSV with one row per class per
/// report, and a JSON summary.
pub fn render_tables(reports: &[ReportSet]) -> RenderedTables {
    let mut text = String::new();
    let mut csv = String::from("report,class,precision,recall,f1,support\n");
    for set in reports {
        let _ = writeln!(text, "{}", set.name);
        let _ = writeln!(text, "{:<14}{:>10}{:>10}{:>10}{:>10}", "class", "precision", "recall", "f1-score", "support");
        for (name, m) in rows(&set.report) {
            let _ = writeln!(
                text,
                "{:<14}{:>10}{:>10}{:>10}{:>10}",
                name,
                cell(m.precision),
                cell(m.recall),
                cell(m.f1),
                m.support
            );
            let _ = writeln!(csv, "{},{},{},{},{},{}", set.name, name, m.precision, m.recall, m.f1, m.support);
        }
        let _ = writeln!(text, "accuracy: {}\n", percent_hundredths(set.report.accuracy));
    }

    let comparison: Vec<ComparisonRow> = BASELINE_ROWS
        .iter()
        .map(|&(method, a, p, r, f)| ComparisonRow {
            method: method.into(),
            accuracy: a.into(),
            precision: p.into(),
            recall: r.into(),
            f1: f.into(),
        })
        .chain(reports.iter().map(|s| ComparisonRow {
            method: s.name.clone(),
            accuracy: percent_hundredths(s.report.accuracy),
            precision: percent_whole(s.report.weighted.precision),
            recall: percent_whole(s.report.weighted.recall),
            f1: percent_whole(s.report.weighted.f1),
        }))
        .collect();
    let width = comparison.iter().map(|r| r.method.len()).max().unwrap_or(0).max(7) + 2;
    let _ = writeln!(text, "{:<width$}{:>10}{:>11}{:>8}{:>10}", "method", "accuracy", "precision", "recall", "f1-score");
    for r in &comparison {
        let _ = writeln!(text, "{:<width$}{:>10}{:>11}{:>8}{:>10}", r.method, r.accuracy, r.precision, r.recall, r.f1);
    }
    let _ = writeln!(text, "\n{DISCREPANCY_NOTE}");

    let json = serde_json::json!({
        "reports": reports
            .iter()
            .map(|s| serde_json::json!({
                "name": s.name,
                "accuracy": s.report.accuracy,
                "weighted": s.report.weighted,
                "per_class": ClassLabel::ALL
                    .iter()
                    .map(|c| (c.to_string(), serde_json::to_value(s.report.per_class[c.index()]).unwrap_or_default()))
                    .collect::<serde_json::Map<_, _>>(),
                "confusion_matrix": s.report.matrix.0,
            }))
            .collect::<Vec<_>>(),
        "comparison": comparison,
        "notes": [DISCREPANCY_NOTE],
    });

    RenderedTables { text, csv, comparison, json }
}
