//! Sweep execution and run-directory layout.
//!
//! ```text
//! <out>/manifest.toml                  resolved config, replayable
//! <out>/report.csv                     one row per (method, τ, k, seed)
//! <out>/histograms/<cell>.tsv          entropy density per cell
//! <out>/traces/<cell>/<task>.jsonl     one trace per task
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gated_latent_core::analysis::{entropy_histogram, summarize_run, EntropyHistogram, EvalReport};
use gated_latent_core::decode::trace::write_trace;
use gated_latent_core::decode::{decode, DecodeConfig, Transcript};
use gated_latent_core::dist::EmbeddingTable;
use gated_latent_core::model::{LanguageModel, ToyTransformer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MethodSpec, ModelSpec};
use crate::tasks::TaskSuite;

pub const REPORT_FILE: &str = "report.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// One (method, τ, k, seed) cell of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub method: MethodSpec,
    pub tau: f64,
    pub gate_k: usize,
    pub seed: u64,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{}_tau{}_k{}_seed{}", self.method, self.tau, self.gate_k, self.seed)
    }
}

/// A row of `report.csv`. Optional metrics are empty fields when undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub tau: f64,
    pub gate_k: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub t_c: Option<f64>,
    pub t_w: Option<f64>,
    pub tpca: Option<f64>,
    pub activation_freq: f64,
}

impl ReportRow {
    fn new(cell: &Cell, r: &EvalReport) -> Self {
        ReportRow {
            method: cell.method.name().to_string(),
            tau: cell.tau,
            gate_k: cell.gate_k,
            seed: cell.seed,
            accuracy: r.accuracy,
            t_c: r.t_c,
            t_w: r.t_w,
            tpca: r.tpca,
            activation_freq: r.activation_freq,
        }
    }
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for (tau, gate_k) in cfg.sweep.cells() {
            for &seed in &cfg.seeds {
                out.push(Cell { method, tau, gate_k, seed });
            }
        }
    }
    out
}

/// Per-task decode seed, distinct across tasks of one cell.
pub fn task_seed(seed: u64, task_index: usize) -> u64 {
    seed ^ (task_index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub enum LoadedModel {
    Toy(ToyTransformer),
    Scripted(EmbeddingTable),
}

impl LoadedModel {
    pub fn load(spec: &ModelSpec, suite: &TaskSuite) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Toy { toy } => LoadedModel::Toy(ToyTransformer::new(toy.clone()).context("model.toy")?),
            ModelSpec::Weights { path } => LoadedModel::Toy(
                ToyTransformer::load_weights(path).with_context(|| format!("model.path: {}", path.display()))?,
            ),
            ModelSpec::Scripted => LoadedModel::Scripted(suite.embeddings()?),
        })
    }
}

fn decode_config(cfg: &ExperimentConfig, suite: &TaskSuite, cell: &Cell) -> DecodeConfig {
    let mut d = cell.method.apply(&cfg.decode);
    d.tau = cell.tau;
    d.gate_k = cell.gate_k;
    d.eos_token = suite.eos;
    d.separator_token = Some(suite.separator);
    d
}

/// Decodes every task of the suite for one cell.
pub fn run_cell(cfg: &ExperimentConfig, suite: &TaskSuite, model: &LoadedModel, cell: &Cell) -> Result<Vec<Transcript>> {
    let base = decode_config(cfg, suite, cell);
    suite
        .tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let dc = DecodeConfig { seed: task_seed(cell.seed, i), ..base.clone() };
            let t = match model {
                LoadedModel::Toy(m) => run_one(m, &task.prompt, &dc),
                LoadedModel::Scripted(table) => run_one(&suite.model_for(table, task)?, &task.prompt, &dc),
            };
            t.with_context(|| format!("cell {} task {}", cell.label(), task.id))
        })
        .collect()
}

fn run_one<M: LanguageModel>(m: &M, prompt: &[gated_latent_core::dist::TokenId], cfg: &DecodeConfig) -> Result<Transcript> {
    Ok(decode(m, prompt, cfg)?)
}

pub struct CellResult {
    pub cell: Cell,
    pub transcripts: Vec<Transcript>,
    pub report: EvalReport,
    pub histogram: EntropyHistogram,
}

/// Runs the whole sweep on up to `jobs` threads and writes the run
/// directory. Cell outputs go to disjoint paths; the report is written once
/// all cells finish.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Vec<ReportRow>> {
    cfg.validate()?;
    let suite = TaskSuite::load(&cfg.task_suite)
        .with_context(|| format!("task_suite: cannot load {}", cfg.task_suite.display()))?;
    let model = LoadedModel::load(&cfg.model, &suite)?;
    fs::create_dir_all(out).with_context(|| format!("output_dir: cannot create {}", out.display()))?;
    fs::write(out.join(MANIFEST_FILE), cfg.manifest()?)
        .with_context(|| format!("output_dir: cannot write {}", out.display()))?;

    let gold: Vec<_> = suite.tasks.iter().map(|t| t.gold.clone()).collect();
    let cells = cells(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("starting worker pool")?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| -> Result<ReportRow> {
                let transcripts = run_cell(cfg, &suite, &model, cell)?;
                let report = summarize_run(&transcripts, &gold)?;
                let histogram = entropy_histogram(&transcripts, cfg.histogram_bins)?;
                let result = CellResult {
                    cell: *cell,
                    transcripts,
                    report,
                    histogram,
                };
                write_cell(out, &suite, &result)?;
                Ok(ReportRow::new(cell, &result.report))
            })
            .collect::<Result<Vec<_>>>()
    })?;

    write_report(&out.join(REPORT_FILE), &rows)?;
    Ok(rows)
}

fn write_cell(out: &Path, suite: &TaskSuite, r: &CellResult) -> Result<()> {
    let label = r.cell.label();
    let trace_dir = out.join("traces").join(&label);
    fs::create_dir_all(&trace_dir)?;
    for (task, t) in suite.tasks.iter().zip(&r.transcripts) {
        let path = trace_dir.join(format!("{}.jsonl", task.id));
        let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?);
        write_trace(t, &mut w)?;
        w.flush()?;
    }
    let hist_dir = out.join("histograms");
    fs::create_dir_all(&hist_dir)?;
    write_histogram(&hist_dir.join(format!("{label}.tsv")), &r.histogram)
}

pub fn write_histogram(path: &Path, h: &EntropyHistogram) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    w.write_record(["bin_left", "bin_right", "density"])?;
    for b in &h.bins {
        w.write_record([b.left.to_string(), b.right.to_string(), b.density.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

/// Every file under `dir`, relative and sorted, for replay comparisons.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(p.strip_prefix(root)?.to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}
