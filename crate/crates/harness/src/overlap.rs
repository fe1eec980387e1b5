//! Overlap analysis over a directory of saved traces.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use gated_latent_core::analysis::{
    detect_branching_steps, overlap_profile, OverlapConfig, OverlapProfile, DEFAULT_MAX_BRANCHING,
    DEFAULT_RATIO_BOUND,
};
use gated_latent_core::decode::trace::read_trace;
use gated_latent_core::decode::Transcript;
use gated_latent_core::model::LanguageModel;

use crate::experiment::list_files;

#[derive(Clone, Debug)]
pub struct OverlapOptions {
    pub tau: f64,
    pub ratio_bound: f64,
    pub max_n: usize,
    pub seed: u64,
    pub profile: OverlapConfig,
}

impl Default for OverlapOptions {
    fn default() -> Self {
        OverlapOptions {
            tau: 0.5,
            ratio_bound: DEFAULT_RATIO_BOUND,
            max_n: DEFAULT_MAX_BRANCHING,
            seed: 0,
            profile: OverlapConfig::default(),
        }
    }
}

/// Loads every `.jsonl` trace under `dir` in sorted path order.
pub fn load_traces(dir: &Path) -> Result<Vec<(PathBuf, Transcript)>> {
    let mut out = Vec::new();
    for rel in list_files(dir)? {
        if rel.extension().is_some_and(|e| e == "jsonl") {
            let path = dir.join(&rel);
            let f = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let t = read_trace(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))?;
            out.push((rel, t));
        }
    }
    ensure!(!out.is_empty(), "empty input: no .jsonl traces under {}", dir.display());
    Ok(out)
}

/// Branching-step detection followed by the four-pass profile.
pub fn analyze<M: LanguageModel>(
    model: &M,
    transcripts: &[Transcript],
    opts: &OverlapOptions,
) -> Result<(OverlapProfile, OverlapProfile)> {
    let steps = detect_branching_steps(transcripts, opts.tau, opts.ratio_bound, opts.max_n, opts.seed)?;
    ensure!(
        !steps.is_empty(),
        "empty input: no branching steps above tau={} with ratio below {}",
        opts.tau,
        opts.ratio_bound
    );
    Ok(overlap_profile(model, transcripts, &steps, &opts.profile)?)
}

pub fn write_overlap_csv(path: &Path, raw: &OverlapProfile, regularized: &OverlapProfile) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["layer", "o_top1_mean", "o_top1_se", "o_top2_mean", "o_top2_se", "variant", "n"])?;
    for (variant, p) in [("raw", raw), ("regularized", regularized)] {
        for (l, x) in p.layers.iter().enumerate() {
            w.write_record([
                l.to_string(),
                x.o_top1_mean.to_string(),
                x.o_top1_se.to_string(),
                x.o_top2_mean.to_string(),
                x.o_top2_se.to_string(),
                variant.to_string(),
                p.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
