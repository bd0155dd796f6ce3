//! Per-run summary rows and per-(method, checkpoint) aggregates.
//!
//! Quantiles use the nearest-rank convention: the `p`-quantile of `n` sorted
//! values is the value at 1-based rank `max(1, ceil(p * n))`. The median is
//! the 0.5-quantile under the same rule.

use std::fmt::Write as _;

use log::warn;

use super::{Event, EventBody, ExperimentReport, HarnessError};

pub const CSV_HEADER: &str = "method,checkpoint,run,final_mean,true_value,trials_used";

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub checkpoint: f64,
    pub run: usize,
    pub final_mean: f64,
    pub true_value: Option<f64>,
    pub trials_used: usize,
}

/// Orders rows by method (first appearance), then checkpoint, then run.
fn sort_rows(rows: &mut [SummaryRow]) {
    let mut order: Vec<String> = Vec::new();
    for r in rows.iter() {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
    }
    let rank = |m: &str| order.iter().position(|o| o == m).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| {
        rank(&a.method)
            .cmp(&rank(&b.method))
            .then(a.checkpoint.total_cmp(&b.checkpoint))
            .then(a.run.cmp(&b.run))
    });
}

pub fn rows_from_reports<'a>(reports: impl IntoIterator<Item = &'a ExperimentReport>) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = reports
        .into_iter()
        .flat_map(|rep| rep.records())
        .map(|r| SummaryRow {
            method: r.method.clone(),
            checkpoint: r.checkpoint,
            run: r.run,
            final_mean: r.final_mean,
            true_value: r.true_value,
            trials_used: r.trials_used,
        })
        .collect();
    sort_rows(&mut rows);
    rows
}

pub fn rows_from_events(events: &[Event]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::FinalEvaluation {
                checkpoint,
                final_mean,
                true_value,
                trials_used,
                ..
            } => Some(SummaryRow {
                method: e.method.clone(),
                checkpoint: *checkpoint,
                run: e.run_index,
                final_mean: *final_mean,
                true_value: *true_value,
                trials_used: *trials_used,
            }),
            _ => None,
        })
        .collect();
    sort_rows(&mut rows);
    rows
}

pub fn to_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let true_value = r.true_value.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method, r.checkpoint, r.run, r.final_mean, true_value, r.trials_used
        );
    }
    out
}

/// Nearest-rank quantile of an ascending slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub checkpoint: f64,
    pub runs: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl Aggregate {
    fn of(method: &str, checkpoint: f64, values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            method: method.to_string(),
            checkpoint,
            runs: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            median: nearest_rank(&sorted, 0.5),
            q1: nearest_rank(&sorted, 0.25),
            q3: nearest_rank(&sorted, 0.75),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
        }
    }
}

/// Final-mean statistics per (method, checkpoint), in row order.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(m, c)| *m == r.method && *c == r.checkpoint) {
            keys.push((r.method.clone(), r.checkpoint));
        }
    }
    keys.iter()
        .map(|(m, c)| {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == *m && r.checkpoint == *c)
                .map(|r| r.final_mean)
                .collect();
            Aggregate::of(m, *c, &values)
        })
        .collect()
}

/// One table per checkpoint with methods as rows.
pub fn to_markdown(aggregates: &[Aggregate]) -> String {
    let mut checkpoints: Vec<f64> = aggregates.iter().map(|a| a.checkpoint).collect();
    checkpoints.sort_by(f64::total_cmp);
    checkpoints.dedup();
    let mut out = String::new();
    for (i, cp) in checkpoints.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "### Checkpoint {cp}\n");
        out.push_str("| method | runs | mean | median | q1 | q3 | min | max |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
        for a in aggregates.iter().filter(|a| a.checkpoint == *cp) {
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
                a.method, a.runs, a.mean, a.median, a.q1, a.q3, a.min, a.max
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLog {
    pub events: Vec<Event>,
    /// Set when an unterminated last line was dropped.
    pub truncated_tail: bool,
}

/// Parses a results log. A malformed last line without a trailing newline
/// is treated as an interrupted write and skipped; any other malformed line
/// is an error.
pub fn parse_log(text: &str) -> Result<ParsedLog, HarnessError> {
    let mut events = Vec::new();
    let mut truncated_tail = false;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, raw) in lines.iter().enumerate() {
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Event>(line) {
            Ok(e) => events.push(e),
            Err(_) if i + 1 == lines.len() && !raw.ends_with('\n') => {
                warn!("ignoring truncated last line of the results log");
                truncated_tail = true;
            }
            Err(e) => {
                return Err(HarnessError::Log(format!("line {}: {e}", i + 1)));
            }
        }
    }
    Ok(ParsedLog {
        events,
        truncated_tail,
    })
}
