//! Consolidated sweep tables.
//!
//! Seeds are averaged per (method, τ, k) cell. Each method's best cell is
//! the one with the highest mean accuracy, ties going to the lowest τ and
//! then the lowest k.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Result};
use serde::Serialize;

use crate::experiment::{read_report, ReportRow, REPORT_FILE};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_MD: &str = "summary.md";
pub const OVERHEAD_CSV: &str = "overhead.csv";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub tau: f64,
    pub gate_k: usize,
    pub n_seeds: usize,
    pub accuracy: f64,
    pub t_c: Option<f64>,
    pub tpca: Option<f64>,
    pub activation_freq: f64,
    pub best: bool,
}

/// Percentage change of a method's cell metrics against the baseline's
/// matching cell: `100·(x − base)/base`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverheadRow {
    pub method: String,
    pub baseline: String,
    pub tau: f64,
    pub gate_k: usize,
    pub accuracy_delta_pct: Option<f64>,
    pub t_c_delta_pct: Option<f64>,
    pub tpca_delta_pct: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Averages seeds per cell, in first-appearance order, and flags each
/// method's best cell.
pub fn summarize(rows: &[ReportRow]) -> Result<Vec<SummaryRow>> {
    ensure!(!rows.is_empty(), "empty input: no report rows");
    let mut keys: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.tau, r.gate_k);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out: Vec<SummaryRow> = keys
        .into_iter()
        .map(|(method, tau, gate_k)| {
            let sel: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.method == method && r.tau == tau && r.gate_k == gate_k)
                .collect();
            SummaryRow {
                n_seeds: sel.len(),
                accuracy: mean(sel.iter().map(|r| r.accuracy)).unwrap_or(0.0),
                t_c: mean(sel.iter().filter_map(|r| r.t_c)),
                tpca: mean(sel.iter().filter_map(|r| r.tpca)),
                activation_freq: mean(sel.iter().map(|r| r.activation_freq)).unwrap_or(0.0),
                best: false,
                method,
                tau,
                gate_k,
            }
        })
        .collect();

    let methods: Vec<String> = out.iter().map(|r| r.method.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    for m in methods {
        let best = out
            .iter()
            .enumerate()
            .filter(|(_, r)| r.method == m)
            .min_by(|(_, a), (_, b)| {
                b.accuracy
                    .total_cmp(&a.accuracy)
                    .then(a.tau.total_cmp(&b.tau))
                    .then(a.gate_k.cmp(&b.gate_k))
            })
            .map(|(i, _)| i)
            .expect("method has rows");
        out[best].best = true;
    }
    Ok(out)
}

pub fn overhead(summary: &[SummaryRow], baseline: &str) -> Vec<OverheadRow> {
    let pct = |x: Option<f64>, b: Option<f64>| match (x, b) {
        (Some(x), Some(b)) if b != 0.0 => Some(100.0 * (x - b) / b),
        _ => None,
    };
    summary
        .iter()
        .filter(|r| r.method != baseline)
        .filter_map(|r| {
            let base = summary
                .iter()
                .find(|b| b.method == baseline && b.tau == r.tau && b.gate_k == r.gate_k)?;
            Some(OverheadRow {
                method: r.method.clone(),
                baseline: baseline.to_string(),
                tau: r.tau,
                gate_k: r.gate_k,
                accuracy_delta_pct: pct(Some(r.accuracy), Some(base.accuracy)),
                t_c_delta_pct: pct(r.t_c, base.t_c),
                tpca_delta_pct: pct(r.tpca, base.tpca),
            })
        })
        .collect()
}

/// One τ × k accuracy table per method; the best cell carries a `*`.
pub fn markdown(summary: &[SummaryRow]) -> String {
    let mut s = String::from("# Sweep summary\n\nMean accuracy over seeds. `*` marks each method's best cell.\n");
    let mut methods: Vec<&str> = Vec::new();
    for r in summary {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    for m in methods {
        let rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.method == m).collect();
        let mut taus: Vec<f64> = rows.iter().map(|r| r.tau).collect();
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        let ks: Vec<usize> = rows.iter().map(|r| r.gate_k).collect::<BTreeSet<_>>().into_iter().collect();

        let _ = write!(s, "\n## {m}\n\n| tau |");
        for k in &ks {
            let _ = write!(s, " k={k} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(ks.len()));
        s.push('\n');
        for t in &taus {
            let _ = write!(s, "| {t} |");
            for k in &ks {
                match rows.iter().find(|r| r.tau == *t && r.gate_k == *k) {
                    Some(r) => {
                        let _ = write!(s, " {:.4}{} |", r.accuracy, if r.best { "*" } else { "" });
                    }
                    None => s.push_str(" |"),
                }
            }
            s.push('\n');
        }
    }
    s
}

/// Reads `report.csv` from `run_dir` and writes the summary CSV, the
/// markdown tables and, when the baseline method is present, the overhead
/// CSV.
pub fn sweep_report(run_dir: &Path, baseline: Option<&str>) -> Result<Vec<SummaryRow>> {
    let path = run_dir.join(REPORT_FILE);
    ensure!(path.exists(), "empty input: {} has no {REPORT_FILE}", run_dir.display());
    let rows = read_report(&path)?;
    let summary = summarize(&rows)?;

    let mut w = csv::Writer::from_path(run_dir.join(SUMMARY_CSV))?;
    for r in &summary {
        w.serialize(r)?;
    }
    w.flush()?;
    std::fs::write(run_dir.join(SUMMARY_MD), markdown(&summary))?;

    if let Some(b) = baseline {
        let over = overhead(&summary, b);
        if !over.is_empty() {
            let mut w = csv::Writer::from_path(run_dir.join(OVERHEAD_CSV))?;
            for r in &over {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(summary)
}
