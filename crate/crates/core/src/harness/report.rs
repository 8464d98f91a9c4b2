//! Human-readable tables, plot-ready CSV and JSON output.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{LataError, Result};
use crate::metrics::AggregateReport;

use super::experiment::{AblationRow, TrialReport};

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    write_text(&to_json(value), path)
}

pub fn write_text(text: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LataError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| LataError::io(path, e))
}

const HEADER: [&str; 6] = ["method", "trials", "coverage", "size", "ccv", "aca"];

/// One aligned row per labeled aggregate, `mean ± std` per metric.
pub fn aggregate_table(rows: &[(String, &AggregateReport)]) -> String {
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|(name, a)| {
            [
                name.clone(),
                a.trials.to_string(),
                format!("{:.4} ± {:.4}", a.coverage.mean, a.coverage.std),
                format!("{:.3} ± {:.3}", a.mean_size.mean, a.mean_size.std),
                format!("{:.2} ± {:.2}", a.ccv.mean, a.ccv.std),
                format!("{:.2} ± {:.2}", a.aca.mean, a.aca.std),
            ]
        })
        .collect();
    let mut widths = HEADER.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |fields: &[&str]| {
        let parts: Vec<String> = fields
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (f, &w))| {
                let pad = w - f.chars().count();
                if i == 0 {
                    format!("{f}{}", " ".repeat(pad))
                } else {
                    format!("{}{f}", " ".repeat(pad))
                }
            })
            .collect();
        writeln!(out, "{}", parts.join("  ").trim_end()).expect("write to string");
    };
    line(&HEADER);
    for row in &cells {
        let refs: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&refs);
    }
    out
}

/// `method,trial,coverage,mean_size` rows for coverage-vs-size frontiers.
pub fn coverage_size_csv(series: &[(String, &[TrialReport])]) -> String {
    let mut out = String::from("method,trial,coverage,mean_size\n");
    for (name, trials) in series {
        for t in trials.iter() {
            writeln!(out, "{name},{},{},{}", t.trial, t.report.coverage, t.report.mean_size).expect("write to string");
        }
    }
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let labeled: Vec<(String, &AggregateReport)> = rows
        .iter()
        .map(|r| (format!("{}={}", r.param, r.value), &r.aggregate))
        .collect();
    aggregate_table(&labeled)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("param,value,coverage,mean_size,ccv,aca,failed_trials\n");
    for r in rows {
        let a = &r.aggregate;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.param, r.value, a.coverage.mean, a.mean_size.mean, a.ccv.mean, a.aca.mean, r.failed_trials
        )
        .expect("write to string");
    }
    out
}
