//! Measurements over decode transcripts: entropy histograms, activation
//! frequency, accuracy and token-cost metrics, and the logit-lens overlap
//! protocol (in [`overlap`]).

pub mod overlap;

pub use overlap::{
    aggregate, detect_branching_steps, four_pass_snapshots, overlap_profile, step_overlap, topk_overlap, BranchingStep,
    FourPass, LayerOverlap, LensSnapshot, OverlapConfig, OverlapProfile, StepOverlap, DEFAULT_K_LENS,
    DEFAULT_MAX_BRANCHING, DEFAULT_RATIO_BOUND,
};

use serde::{Deserialize, Serialize};

use crate::decode::Transcript;
use crate::dist::TokenId;
use crate::error::{Error, Result};

pub const DEFAULT_HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
    pub density: f64,
}

/// Density of normalized entropy over `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistogram {
    pub bins: Vec<HistogramBin>,
    pub total: usize,
}

impl EntropyHistogram {
    pub fn bin_width(&self) -> f64 {
        1.0 / self.bins.len() as f64
    }

    /// Fraction of steps falling in bins whose left edge lies in `[lo, hi)`.
    pub fn mass_between(&self, lo: f64, hi: f64) -> f64 {
        self.bins
            .iter()
            .filter(|b| b.left >= lo && b.left < hi)
            .map(|b| b.count)
            .sum::<usize>() as f64
            / self.total as f64
    }
}

/// Histogram of per-step normalized entropy across all steps of all
/// transcripts. A reading of exactly 1 lands in the last bin.
pub fn entropy_histogram(transcripts: &[Transcript], bins: usize) -> Result<EntropyHistogram> {
    if bins < 2 {
        return Err(Error::InvalidParameter(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let mut counts = vec![0usize; bins];
    let mut total = 0;
    for s in transcripts.iter().flat_map(|t| &t.steps) {
        let h = s.entropy.normalized;
        let idx = ((h * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyInput("no decode steps to histogram".into()));
    }
    let width = 1.0 / bins as f64;
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            left: i as f64 / bins as f64,
            right: (i + 1) as f64 / bins as f64,
            count,
            density: count as f64 / (total as f64 * width),
        })
        .collect();
    Ok(EntropyHistogram { bins, total })
}

/// Fraction of steps that fed a latent (soft or regularized) input.
pub fn activation_frequency(transcripts: &[Transcript]) -> Result<f64> {
    let total: usize = transcripts.iter().map(|t| t.steps.len()).sum();
    if total == 0 {
        return Err(Error::EmptyInput("no decode steps to count".into()));
    }
    let latent: usize = transcripts.iter().map(Transcript::latent_steps).sum();
    Ok(latent as f64 / total as f64)
}

/// Tokens per correct answer: `(α·T_c + (1−α)·T_w) / α`.
pub fn tpca(alpha: f64, t_c: f64, t_w: f64) -> Result<f64> {
    if alpha == 0.0 {
        return Err(Error::UndefinedMetric("tokens per correct answer needs at least one correct answer".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!("accuracy must lie in (0, 1], got {alpha}")));
    }
    if !(t_c >= 0.0 && t_w >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "token counts must be non-negative, got T_c={t_c}, T_w={t_w}"
        )));
    }
    Ok((alpha * t_c + (1.0 - alpha) * t_w) / alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub correct: bool,
    pub tokens: usize,
    pub latent_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean emitted tokens over correct transcripts; `None` when none are correct.
    pub t_c: Option<f64>,
    /// Mean emitted tokens over wrong transcripts; `None` when none are wrong.
    pub t_w: Option<f64>,
    /// `None` when accuracy is zero.
    pub tpca: Option<f64>,
    pub activation_freq: f64,
    pub rows: Vec<EvalRow>,
}

/// Exact-match scoring of answer spans against gold answers. Emitted tokens
/// count every sampled token, EOS included.
pub fn summarize_run(transcripts: &[Transcript], gold: &[Vec<TokenId>]) -> Result<EvalReport> {
    if transcripts.is_empty() {
        return Err(Error::EmptyInput("no transcripts to summarize".into()));
    }
    if transcripts.len() != gold.len() {
        return Err(Error::InvalidInput(format!(
            "{} transcripts but {} gold answers",
            transcripts.len(),
            gold.len()
        )));
    }
    let rows: Vec<EvalRow> = transcripts
        .iter()
        .zip(gold)
        .map(|(t, g)| EvalRow {
            correct: t.answer == *g,
            tokens: t.tokens.len(),
            latent_steps: t.latent_steps(),
        })
        .collect();

    let mean = |correct: bool| {
        let sel: Vec<f64> = rows.iter().filter(|r| r.correct == correct).map(|r| r.tokens as f64).collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    };
    let n_correct = rows.iter().filter(|r| r.correct).count();
    let accuracy = n_correct as f64 / rows.len() as f64;
    let t_c = mean(true);
    let t_w = mean(false);
    let tpca = match t_c {
        Some(c) => Some(tpca(accuracy, c, t_w.unwrap_or(0.0))?),
        None => None,
    };
    Ok(EvalReport {
        accuracy,
        t_c,
        t_w,
        tpca,
        activation_freq: activation_frequency(transcripts)?,
        rows,
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::decode::{DecodeConfig, InputMode, StepTrace, Termination, Transcript};
    use crate::dist::{TokenId, TopKCandidates};
    use crate::gate::EntropyReading;

    /// A transcript whose steps carry the given (normalized entropy, latent,
    /// top-2 probabilities) readings, with `tokens` emitted tokens.
    pub fn synthetic(readings: &[(f64, bool, [f64; 2])]) -> Transcript {
        let steps: Vec<StepTrace> = readings
            .iter()
            .enumerate()
            .map(|(i, &(h, latent, p))| StepTrace {
                step: i,
                entropy: EntropyReading {
                    raw: h * std::f64::consts::LN_2,
                    normalized: h,
                    k: 2,
                },
                gate: None,
                token: TokenId(0),
                mode: if latent { InputMode::SoftRegularized } else { InputMode::Discrete },
                candidates: TopKCandidates::new(vec![TokenId(0), TokenId(1)], p.to_vec()).unwrap(),
            })
            .collect();
        let tokens = vec![TokenId(0); steps.len()];
        Transcript {
            config: DecodeConfig::default(),
            prompt: vec![TokenId(1)],
            steps,
            termination: Termination::MaxSteps,
            tokens,
            answer: Vec::new(),
            inputs: Vec::new(),
        }
    }

    pub fn with_entropies(h: &[f64]) -> Transcript {
        let r: Vec<_> = h.iter().map(|&h| (h, false, [0.5, 0.5])).collect();
        synthetic(&r)
    }
}
