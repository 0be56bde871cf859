//! Metrics emission: fixed-column CSV tables and JSON seed summaries.
//!
//! Column conventions shared by the pipelines: the first column is `step`,
//! the second is `wall_clock_s` (seconds since pipeline start at the moment
//! the rows were emitted), followed by the pipeline's loss terms and
//! evaluation scores. `wall_clock_s` is the one intentionally nondeterministic
//! column; determinism checks compare [`MetricsTable::csv_without`] it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Result;

/// Interquartile mean: the mean of the middle 50% of scores (bottom and top
/// quarter dropped, by count). `iqm(&[1..=10])` keeps 3..=8 and returns 5.5.
pub fn iqm(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores must be comparable"));
    let lo = sorted.len() / 4;
    let hi = sorted.len() - lo;
    let mid = &sorted[lo..hi];
    mid.iter().sum::<f64>() / mid.len() as f64
}

/// Sample mean of a score list.
pub fn mean(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Sample standard deviation (Bessel-corrected); 0 for fewer than two scores.
pub fn std_dev(scores: &[f64]) -> f64 {
    if scores.len() < 2 {
        return 0.0;
    }
    let m = mean(scores);
    let var = scores.iter().map(|&s| (s - m) * (s - m)).sum::<f64>() / (scores.len() - 1) as f64;
    var.sqrt()
}

/// A fixed-column numeric table rendered as CSV.
#[derive(Clone, Debug)]
pub struct MetricsTable {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn new(columns: &[&str]) -> MetricsTable {
        MetricsTable { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(
            row.len(),
            self.columns.len(),
            "row width {} does not match the {} declared columns",
            row.len(),
            self.columns.len()
        );
        self.rows.push(row.to_vec());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        self.csv_without(&[])
    }

    /// CSV with the named columns removed — used to compare runs while
    /// excluding `wall_clock_s`.
    pub fn csv_without(&self, drop: &[&str]) -> String {
        let keep: Vec<usize> = (0..self.columns.len())
            .filter(|&i| !drop.contains(&self.columns[i].as_str()))
            .collect();
        let mut out = String::new();
        out.push_str(
            &keep.iter().map(|&i| self.columns[i].as_str()).collect::<Vec<_>>().join(","),
        );
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = keep.iter().map(|&i| format_cell(row[i])).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::dataset::write_all(path, self.to_csv().as_bytes())
    }
}

/// Deterministic, shortest-round-trip float formatting; NaN and infinities
/// spelled out.
fn format_cell(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        // Rust's Display for floats is the shortest string that parses back
        // exactly, and prints infinities as "inf"/"-inf".
        format!("{v}")
    }
}

/// Aggregate statistics of one experiment across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub final_iqm: f64,
    pub mean: f64,
    pub std: f64,
    pub scores: Vec<f64>,
}

impl SeedSummary {
    pub fn from_scores(scores: &[f64]) -> SeedSummary {
        SeedSummary {
            final_iqm: iqm(scores),
            mean: mean(scores),
            std: std_dev(scores),
            scores: scores.to_vec(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<SeedSummary> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::dataset::write_all(path, self.to_json()?.as_bytes())
    }
}
