//! Plain-text, JSON and CSV rendering of comparison documents.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::bench::{compare, BenchError, ComparisonEntry, ComparisonTable};
use crate::metrics::{EvalReport, REPORT_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no report inputs")]
    NoInputs,
    #[error(transparent)]
    Bench(#[from] BenchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Structured,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" | "structured" => Ok(ReportFormat::Structured),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!(
                "unknown report format {other:?} (expected text, json or csv)"
            )),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Text => "text",
            ReportFormat::Structured => "json",
            ReportFormat::Csv => "csv",
        })
    }
}

/// Left-aligned columns separated by two spaces, with a dashed rule under
/// the first row. Trailing spaces are trimmed.
pub fn align_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let mut line = String::new();
        for (j, cell) in row.iter().enumerate() {
            if j > 0 {
                line.push_str("  ");
            }
            line.push_str(cell);
            line.extend(std::iter::repeat_n(' ', widths[j] - cell.chars().count()));
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

/// Rounds to six decimals and prints the shortest form (`19`, `0.7008`).
pub fn fmt_num(v: f64) -> String {
    let r = (v * 1e6).round() / 1e6;
    if r == 0.0 {
        "0".to_string()
    } else {
        r.to_string()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_else(|| "-".to_string())
}

pub const ROW_LABELS: [&str; 4] = ["mAP@.5", "Loss", "Training Time", "Test Time per image"];

/// Table with one column per backend and the four metric rows.
pub fn render_comparison(table: &ComparisonTable) -> String {
    let mut header = vec!["Parameter".to_string()];
    header.extend(table.rows.iter().map(|r| r.backend.clone()));
    let mut out = vec![header];
    let units = ["", "", " h", " ms"];
    for (k, label) in ROW_LABELS.iter().enumerate() {
        let mut line = vec![label.to_string()];
        for row in &table.rows {
            line.push(match row.cells()[k] {
                Some(c) => format!("{}{}", fmt_num(c.value), units[k]),
                None => "-".to_string(),
            });
        }
        out.push(line);
    }
    align_table(&out)
}

/// Headline lines, per-class table and conventions of one evaluation.
pub fn render_eval(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("images: {}\n", report.images));
    s.push_str(&format!("precision: {}\n", fmt_num(report.precision)));
    s.push_str(&format!("recall: {}\n", fmt_num(report.recall)));
    s.push_str(&format!("mAP@.5: {}\n", fmt_num(report.map50)));
    s.push_str(&format!("mAP@.5:.95: {}\n\n", fmt_num(report.map50_95)));
    let mut rows = vec![[
        "class",
        "gt",
        "det",
        "tp",
        "fp",
        "fn",
        "P",
        "R",
        "AP@.5",
        "AP@.5:.95",
    ]
    .iter()
    .map(|h| h.to_string())
    .collect::<Vec<_>>()];
    for c in &report.per_class {
        rows.push(vec![
            c.name.clone(),
            c.ground_truth.to_string(),
            c.detections.to_string(),
            c.counts.tp.to_string(),
            c.counts.fp.to_string(),
            c.counts.fn_.to_string(),
            fmt_num(c.precision),
            fmt_num(c.recall),
            fmt_opt(c.ap50),
            fmt_opt(c.ap50_95),
        ]);
    }
    s.push_str(&align_table(&rows));
    s.push_str(&format!(
        "\nP, R and counts at IoU {} and confidence >= {}; AP interpolation {}; \
         classes without ground truth ('-') are excluded from mAP.\n",
        fmt_num(report.config.iou_threshold),
        fmt_num(report.config.confidence_threshold),
        report.config.interpolation
    ));
    s
}

#[derive(Serialize)]
struct StructuredReport<'a> {
    schema_version: u32,
    comparison: &'a ComparisonTable,
    entries: &'a [ComparisonEntry],
}

/// Renders entries as one document. Output depends only on the inputs.
pub fn generate_report(
    entries: &[ComparisonEntry],
    format: ReportFormat,
) -> Result<String, ReportError> {
    if entries.is_empty() {
        return Err(ReportError::NoInputs);
    }
    let table = compare(entries)?;
    Ok(match format {
        ReportFormat::Text => {
            let mut s = render_comparison(&table);
            for e in entries {
                if let Some(eval) = &e.eval {
                    s.push_str(&format!("\n== {}: evaluation ==\n", e.backend));
                    s.push_str(&render_eval(eval));
                }
                if let Some(l) = &e.latency {
                    s.push_str(&format!("\n== {}: latency ==\n", e.backend));
                    s.push_str(&format!("({})\n", l.note));
                    s.push_str(&format!(
                        "samples: {} ({} images x {} repeats, {} warmup calls excluded)\n",
                        l.sample_count, l.images, l.repeats, l.warmup
                    ));
                    s.push_str(&format!(
                        "mean {} ms, median {} ms, p95 {} ms, min {} ms, max {} ms\n",
                        fmt_num(l.mean_ms),
                        fmt_num(l.median_ms),
                        fmt_num(l.p95_ms),
                        fmt_num(l.min_ms),
                        fmt_num(l.max_ms)
                    ));
                }
                if let Some(t) = &e.trainlog {
                    s.push_str(&format!("\n== {}: training log ==\n", e.backend));
                    s.push_str(&format!("epochs logged: {}\n", t.row_count));
                    for (label, row) in [
                        ("best mAP@.5", &t.best_map50),
                        ("best mAP@.5:.95", &t.best_map50_95),
                        ("best precision", &t.best_precision),
                        ("best recall", &t.best_recall),
                    ] {
                        s.push_str(&format!("{label}: epoch {}\n", row.epoch));
                    }
                    s.push_str(&format!(
                        "final epoch {}: total loss {}\n",
                        t.final_row.epoch,
                        fmt_num(t.final_row.total_loss())
                    ));
                }
            }
            s
        }
        ReportFormat::Structured => {
            let doc = StructuredReport {
                schema_version: REPORT_SCHEMA_VERSION,
                comparison: &table,
                entries,
            };
            let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from("backend,map50,loss,training_time_h,test_time_ms\n");
            for r in &table.rows {
                let cell = |c: Option<crate::bench::Cell>| {
                    c.map(|c| c.value.to_string()).unwrap_or_default()
                };
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.backend,
                    cell(r.map50),
                    cell(r.loss),
                    cell(r.training_time_hours),
                    cell(r.test_time_ms)
                ));
            }
            s
        }
    })
}
