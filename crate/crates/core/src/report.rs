//! Stable output formats: metrics CSV, mask CSV, JSON reports, and the
//! score-file parser used by the CLI.
//!
//! Floats are rendered with Rust's shortest-round-trip formatting, which is
//! deterministic, so repeated runs with the same seed produce byte-identical
//! files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::routing::{RoutingMask, ScoreMatrix};
use crate::train::MetricsRow;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Envelope for all JSON reports: {schema_version, metric, layer, strategy, values}.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport<T: Serialize> {
    pub schema_version: u32,
    pub metric: String,
    pub layer: usize,
    pub strategy: String,
    pub values: T,
}

impl<T: Serialize> MetricReport<T> {
    pub fn new(metric: &str, layer: usize, strategy: &str, values: T) -> Self {
        MetricReport {
            schema_version: REPORT_SCHEMA_VERSION,
            metric: metric.to_string(),
            layer,
            strategy: strategy.to_string(),
            values,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// The training-trace CSV. Header:
/// `step,task_loss,aux_loss,total_loss,mean_experts_per_token,entropy_normalized`.
pub fn render_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out =
        String::from("step,task_loss,aux_loss,total_loss,mean_experts_per_token,entropy_normalized\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.task_loss, r.aux_loss, r.total_loss, r.mean_experts_per_token, r.entropy_normalized
        );
    }
    out
}

/// Binary mask as CSV rows of 0/1.
pub fn render_mask_csv(mask: &RoutingMask) -> String {
    let mut out = String::new();
    for t in 0..mask.n_tokens() {
        let row: Vec<&str> = (0..mask.n_experts())
            .map(|i| if mask.is_selected(t, i) { "1" } else { "0" })
            .collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Histogram as a two-column CSV.
pub fn render_histogram_csv(hist: &BTreeMap<usize, usize>) -> String {
    let mut out = String::from("experts_per_token,tokens\n");
    for (c, n) in hist {
        let _ = writeln!(out, "{},{}", c, n);
    }
    out
}

/// Parses a comma-separated T x N score file into a row-stochastic matrix.
/// Errors carry 1-based line and column positions.
pub fn parse_scores_csv(text: &str) -> Result<ScoreMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col_no, field) in trimmed.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidInput(format!(
                    "line {}, column {}: '{}' is not a number",
                    line_no + 1,
                    col_no + 1,
                    field.trim()
                ))
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::InvalidInput(format!(
                    "line {}: {} columns, expected {}",
                    line_no + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("line 1: no score rows found".into()));
    }
    let n = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        crate::routing::validate_prob_row(row, n)
            .map_err(|e| Error::InvalidInput(format!("line {}: {}", i + 1, e)))?;
    }
    ScoreMatrix::new(Mat::from_rows(&rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::topk_route;

    #[test]
    fn metrics_csv_round_trips_float_bits() {
        let rows = vec![MetricsRow {
            step: 0,
            task_loss: 1.0 / 3.0,
            aux_loss: 0.1,
            total_loss: 1.0 / 3.0 + 0.001,
            mean_experts_per_token: 2.0,
            entropy_normalized: 0.987654321,
        }];
        let csv = render_metrics_csv(&rows);
        let line = csv.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        let parsed: f64 = fields[1].parse().unwrap();
        assert_eq!(parsed, 1.0 / 3.0);
    }

    #[test]
    fn mask_csv_shape() {
        let s = ScoreMatrix::from_rows(&[vec![0.5, 0.45, 0.05], vec![0.34, 0.33, 0.33]]).unwrap();
        let mask = crate::routing::seqtopk_route_unbounded(&s, 1).unwrap();
        let csv = render_mask_csv(&mask);
        assert_eq!(csv, "1,1,0\n0,0,0\n");
    }

    #[test]
    fn parse_scores_reports_line_and_column() {
        let err = parse_scores_csv("0.5,0.5\n0.4,oops\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{}", msg);
        assert!(msg.contains("column 2"), "{}", msg);
    }

    #[test]
    fn parse_scores_rejects_bad_row_sum() {
        let err = parse_scores_csv("0.7,0.5\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn parse_scores_accepts_valid_file() {
        let s = parse_scores_csv("0.5,0.45,0.05\n0.34,0.33,0.33\n").unwrap();
        assert_eq!(s.n_tokens(), 2);
        let mask = topk_route(&s, 1).unwrap();
        assert_eq!(mask.selected_experts(0), vec![0]);
    }
}
