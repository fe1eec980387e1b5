//! Branching-step detection and the four-pass logit-lens overlap protocol.
//!
//! At a branching step the cached state is restored four times and stepped
//! with the top-1 embedding, the top-2 embedding, the plain soft embedding
//! and the regularized soft embedding. Each pass yields one top-`k_lens`
//! token set per layer; the soft passes are scored by how much of each
//! reference set they share.

use std::collections::{BTreeMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{step_input, Transcript};
use crate::dist::{softmax, topk_renormalize, EmbeddingVector, TokenId};
use crate::error::{Error, Result};
use crate::gate::{check_tau, EntropyReading};
use crate::latent::{contrastive_regularize, soft_embedding, RegularizationConfig};
use crate::model::{LanguageModel, LayerActivations, ModelState};

pub const DEFAULT_RATIO_BOUND: f64 = 2.0;
pub const DEFAULT_MAX_BRANCHING: usize = 200;
pub const DEFAULT_K_LENS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchingStep {
    /// Index into the transcript slice the step was detected in.
    pub transcript: usize,
    pub step: usize,
    pub dominant: TokenId,
    pub runner_up: TokenId,
    pub dominant_prob: f64,
    pub runner_up_prob: f64,
    pub ratio: f64,
}

/// Steps with `H̄ > τ` and a top-1/top-2 ratio below `ratio_bound`. When more
/// than `max_n` qualify, `max_n` of them are drawn uniformly without
/// replacement from a stream seeded with `seed`. Output is ordered by
/// (transcript, step).
pub fn detect_branching_steps(
    transcripts: &[Transcript],
    tau: f64,
    ratio_bound: f64,
    max_n: usize,
    seed: u64,
) -> Result<Vec<BranchingStep>> {
    check_tau(tau)?;
    if !(ratio_bound > 1.0) {
        return Err(Error::InvalidParameter(format!("ratio bound must exceed 1, got {ratio_bound}")));
    }
    if max_n == 0 {
        return Err(Error::InvalidParameter("max_n must be at least 1".into()));
    }
    let mut found = Vec::new();
    for (ti, t) in transcripts.iter().enumerate() {
        for s in &t.steps {
            let (Some(runner_up), Some(p2)) = (s.candidates.runner_up(), s.runner_up_prob()) else {
                continue;
            };
            if s.entropy.normalized <= tau || p2 <= 0.0 {
                continue;
            }
            let p1 = s.dominant_prob();
            let ratio = p1 / p2;
            if ratio < ratio_bound {
                found.push(BranchingStep {
                    transcript: ti,
                    step: s.step,
                    dominant: s.candidates.dominant(),
                    runner_up,
                    dominant_prob: p1,
                    runner_up_prob: p2,
                    ratio,
                });
            }
        }
    }
    if found.len() <= max_n {
        return Ok(found);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, found.len(), max_n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| found[i].clone()).collect())
}

/// `|a ∩ b| / k` for two size-`k` token sets.
pub fn topk_overlap(a: &[TokenId], b: &[TokenId], k: usize) -> Result<f64> {
    let sa: HashSet<_> = a.iter().collect();
    let sb: HashSet<_> = b.iter().collect();
    if k == 0 || a.len() != k || b.len() != k || sa.len() != k || sb.len() != k {
        return Err(Error::InvalidInput(format!(
            "overlap needs two sets of {k} distinct tokens, got {} and {}",
            sa.len(),
            sb.len()
        )));
    }
    Ok(sa.intersection(&sb).count() as f64 / k as f64)
}

/// Per-layer top-`k_lens` lens token sets for one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensSnapshot {
    pub k_lens: usize,
    pub sets: Vec<Vec<TokenId>>,
}

impl LensSnapshot {
    pub fn new(k_lens: usize, sets: Vec<Vec<TokenId>>) -> Result<Self> {
        for (l, set) in sets.iter().enumerate() {
            let distinct: HashSet<_> = set.iter().collect();
            if set.len() != k_lens || distinct.len() != k_lens {
                return Err(Error::InvalidInput(format!(
                    "layer {l} set must hold {k_lens} distinct tokens"
                )));
            }
        }
        Ok(LensSnapshot { k_lens, sets })
    }

    /// Projects every layer of `activations` through the lens.
    pub fn capture<M: LanguageModel>(model: &M, activations: &LayerActivations, k_lens: usize) -> Result<Self> {
        if k_lens == 0 || k_lens > model.vocab_size() {
            return Err(Error::InvalidParameter(format!(
                "k_lens must lie in 1..={}, got {k_lens}",
                model.vocab_size()
            )));
        }
        let sets = activations
            .iter()
            .enumerate()
            .map(|(l, h)| Ok(model.logit_lens(h, l)?.top_ids(k_lens)))
            .collect::<Result<Vec<_>>>()?;
        Ok(LensSnapshot { k_lens, sets })
    }

    pub fn num_layers(&self) -> usize {
        self.sets.len()
    }
}

/// Overlap of one soft pass against both references, per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOverlap {
    pub o_top1: Vec<f64>,
    pub o_top2: Vec<f64>,
}

pub fn step_overlap(top1: &LensSnapshot, top2: &LensSnapshot, soft: &LensSnapshot) -> Result<StepOverlap> {
    let k = soft.k_lens;
    if top1.k_lens != k || top2.k_lens != k {
        return Err(Error::InvalidInput("lens snapshots use different k".into()));
    }
    let layers = soft.num_layers();
    if top1.num_layers() != layers || top2.num_layers() != layers {
        return Err(Error::InvalidInput("lens snapshots cover different layer counts".into()));
    }
    let mut o_top1 = Vec::with_capacity(layers);
    let mut o_top2 = Vec::with_capacity(layers);
    for l in 0..layers {
        o_top1.push(topk_overlap(&soft.sets[l], &top1.sets[l], k)?);
        o_top2.push(topk_overlap(&soft.sets[l], &top2.sets[l], k)?);
    }
    Ok(StepOverlap { o_top1, o_top2 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOverlap {
    pub o_top1_mean: f64,
    pub o_top1_se: f64,
    pub o_top2_mean: f64,
    pub o_top2_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapProfile {
    pub layers: Vec<LayerOverlap>,
    pub n: usize,
}

/// Mean and standard error (sample standard deviation over √N) of a sample.
/// A single observation has zero standard error.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-layer mean and standard error over steps.
pub fn aggregate(steps: &[StepOverlap]) -> Result<OverlapProfile> {
    let first = steps
        .first()
        .ok_or_else(|| Error::EmptyInput("no step overlaps to aggregate".into()))?;
    let layers = first.o_top1.len();
    if steps.iter().any(|s| s.o_top1.len() != layers || s.o_top2.len() != layers) {
        return Err(Error::InvalidInput("step overlaps cover different layer counts".into()));
    }
    let layers = (0..layers)
        .map(|l| {
            let a: Vec<f64> = steps.iter().map(|s| s.o_top1[l]).collect();
            let b: Vec<f64> = steps.iter().map(|s| s.o_top2[l]).collect();
            let (o_top1_mean, o_top1_se) = mean_se(&a);
            let (o_top2_mean, o_top2_se) = mean_se(&b);
            LayerOverlap {
                o_top1_mean,
                o_top1_se,
                o_top2_mean,
                o_top2_se,
            }
        })
        .collect();
    Ok(OverlapProfile { layers, n: steps.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlapConfig {
    pub k_lens: usize,
    /// Mixture support of the soft passes; the transcript's `gate_k` when unset.
    pub mixture_k: Option<usize>,
    /// Epsilon of the regularized pass.
    pub epsilon: f64,
}

impl Default for OverlapConfig {
    fn default() -> Self {
        OverlapConfig {
            k_lens: DEFAULT_K_LENS,
            mixture_k: None,
            epsilon: RegularizationConfig::default().epsilon,
        }
    }
}

/// Lens snapshots of the four passes at one branching step.
#[derive(Clone, Debug, PartialEq)]
pub struct FourPass {
    pub top1: LensSnapshot,
    pub top2: LensSnapshot,
    pub soft: LensSnapshot,
    pub regularized: LensSnapshot,
}

/// Replays each transcript up to its branching steps, runs the four passes
/// from the cached state, and aggregates the overlaps of the plain and the
/// regularized soft pass. Returns `(raw, regularized)` profiles.
///
/// The replay recomputes every step's distribution and checks it against the
/// recorded candidates, so a trace from a different model is rejected.
pub fn overlap_profile<M: LanguageModel>(
    model: &M,
    transcripts: &[Transcript],
    steps: &[BranchingStep],
    cfg: &OverlapConfig,
) -> Result<(OverlapProfile, OverlapProfile)> {
    let passes = four_pass_snapshots(model, transcripts, steps, cfg)?;
    let mut raw = Vec::with_capacity(passes.len());
    let mut reg = Vec::with_capacity(passes.len());
    for p in &passes {
        raw.push(step_overlap(&p.top1, &p.top2, &p.soft)?);
        reg.push(step_overlap(&p.top1, &p.top2, &p.regularized)?);
    }
    Ok((aggregate(&raw)?, aggregate(&reg)?))
}

/// The four lens snapshots for every branching step, in input order.
pub fn four_pass_snapshots<M: LanguageModel>(
    model: &M,
    transcripts: &[Transcript],
    steps: &[BranchingStep],
    cfg: &OverlapConfig,
) -> Result<Vec<FourPass>> {
    if !model.supports_layer_access() {
        return Err(Error::UnsupportedModel("model does not expose layer activations".into()));
    }
    if steps.is_empty() {
        return Err(Error::EmptyInput("no branching steps".into()));
    }
    RegularizationConfig {
        epsilon: cfg.epsilon,
        enabled: true,
    }
    .validate()?;

    let mut by_transcript: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, b) in steps.iter().enumerate() {
        let t = transcripts.get(b.transcript).ok_or_else(|| {
            Error::InvalidInput(format!("branching step refers to missing transcript {}", b.transcript))
        })?;
        if b.step >= t.steps.len() {
            return Err(Error::InvalidInput(format!(
                "transcript {} has no step {}",
                b.transcript, b.step
            )));
        }
        by_transcript.entry(b.transcript).or_default().push(i);
    }

    let mut out: Vec<Option<FourPass>> = vec![None; steps.len()];
    for (ti, idxs) in by_transcript {
        let states = replay(model, &transcripts[ti], idxs.iter().map(|&i| steps[i].step))?;
        for i in idxs {
            let state = &states[&steps[i].step];
            out[i] = Some(four_pass(model, &transcripts[ti], state, cfg)?);
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every step visited")).collect())
}

/// States cached right before each requested step's input is fed.
fn replay<M: LanguageModel>(
    model: &M,
    transcript: &Transcript,
    wanted: impl Iterator<Item = usize>,
) -> Result<BTreeMap<usize, M::State>> {
    let wanted: std::collections::BTreeSet<usize> = wanted.collect();
    let last = *wanted.iter().next_back().expect("non-empty");
    let cfg = &transcript.config;
    let mut state = model.init_state(&transcript.prompt)?;
    let mut cached = BTreeMap::new();
    for s in &transcript.steps[..=last] {
        let logits = &state
            .last_output()
            .ok_or_else(|| Error::InvalidInput("transcript has an empty prompt".into()))?
            .logits;
        let dist = softmax(logits, cfg.sampler.temperature)?;
        let candidates = topk_renormalize(&dist, cfg.gate_k)?;
        let consistent = candidates.tokens() == s.candidates.tokens()
            && candidates
                .probs()
                .iter()
                .zip(s.candidates.probs())
                .all(|(a, b)| (a - b).abs() <= 1e-9);
        if !consistent {
            return Err(Error::InvalidInput(format!(
                "replay diverges from the trace at step {}",
                s.step
            )));
        }
        if wanted.contains(&s.step) {
            cached.insert(s.step, model.snapshot(&state));
        }
        if s.step == last {
            break;
        }
        let input = step_input(model, cfg, s.mode, s.token, &dist, &candidates, s.entropy)?;
        model.step(&mut state, &input)?;
    }
    Ok(cached)
}

fn four_pass<M: LanguageModel>(
    model: &M,
    transcript: &Transcript,
    state: &M::State,
    cfg: &OverlapConfig,
) -> Result<FourPass> {
    let tcfg = &transcript.config;
    let logits = &state.last_output().expect("replayed state has output").logits;
    let dist = softmax(logits, tcfg.sampler.temperature)?;
    let mix = topk_renormalize(&dist, cfg.mixture_k.unwrap_or(tcfg.gate_k))?;
    let refs = topk_renormalize(&dist, 2)?;
    let table = model.embeddings();

    let e_top1 = table.embedding(refs.tokens()[0])?;
    let e_top2 = table.embedding(refs.tokens()[1])?;
    let e_soft = soft_embedding(&mix, table)?;
    let e_reg = contrastive_regularize(
        &e_soft,
        &e_top1,
        EntropyReading::of(&mix).normalized,
        &RegularizationConfig {
            epsilon: cfg.epsilon,
            enabled: true,
        },
    )?;

    let pass = |input: &EmbeddingVector| -> Result<LensSnapshot> {
        let mut s = model.restore(state);
        let out = model.step(&mut s, input)?;
        LensSnapshot::capture(model, &out.activations, cfg.k_lens)
    };
    Ok(FourPass {
        top1: pass(&e_top1)?,
        top2: pass(&e_top2)?,
        soft: pass(&e_soft)?,
        regularized: pass(&e_reg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::testutil::synthetic;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn ratio_and_entropy_filters() {
        let t = synthetic(&[
            (0.47, true, [0.9, 0.1]),
            (0.99, true, [0.55, 0.45]),
            (0.3, false, [0.55, 0.45]),
        ]);
        let found = detect_branching_steps(&[t], 0.5, 2.0, 200, 0).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].step, 1);
        assert!((found[0].ratio - 0.55 / 0.45).abs() < 1e-12);
    }

    #[test]
    fn subsampling_is_seeded_and_ordered() {
        let t = synthetic(&vec![(0.99, true, [0.5, 0.5]); 30]);
        let a = detect_branching_steps(&[t.clone(), t.clone()], 0.5, 2.0, 7, 11).unwrap();
        let b = detect_branching_steps(&[t.clone(), t.clone()], 0.5, 2.0, 7, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        let keys: Vec<_> = a.iter().map(|s| (s.transcript, s.step)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(keys, sorted);
        assert!(detect_branching_steps(&[t], 0.5, 1.0, 7, 0).is_err());
    }

    #[test]
    fn overlap_of_sets() {
        let a = ids(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let b = ids(&[5, 6, 7, 8, 9, 10, 11, 12, 13, 14]);
        let c = ids(&[20, 21, 22, 23, 24, 25, 26, 27, 28, 29]);
        assert_eq!(topk_overlap(&a, &a, 10).unwrap(), 1.0);
        assert_eq!(topk_overlap(&a, &c, 10).unwrap(), 0.0);
        assert_eq!(topk_overlap(&a, &b, 10).unwrap(), 0.5);
        assert_eq!(topk_overlap(&b, &a, 10).unwrap(), 0.5);
        assert!(topk_overlap(&a, &b[..9], 10).is_err());
    }

    #[test]
    fn single_step_has_zero_error() {
        let s = StepOverlap {
            o_top1: vec![0.3, 0.7],
            o_top2: vec![0.1, 0.2],
        };
        let p = aggregate(&[s]).unwrap();
        assert_eq!(p.n, 1);
        assert_eq!(p.layers[1].o_top1_mean, 0.7);
        assert_eq!(p.layers[1].o_top1_se, 0.0);
        assert!(matches!(aggregate(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn two_steps_mean_and_error() {
        let s1 = StepOverlap { o_top1: vec![0.2], o_top2: vec![0.4] };
        let s2 = StepOverlap { o_top1: vec![0.6], o_top2: vec![0.4] };
        let p = aggregate(&[s1, s2]).unwrap();
        // sd of {0.2, 0.6} is 0.2·√2, over √2 gives 0.2
        assert!((p.layers[0].o_top1_mean - 0.4).abs() < 1e-15);
        assert!((p.layers[0].o_top1_se - 0.2).abs() < 1e-15);
        assert_eq!(p.layers[0].o_top2_se, 0.0);
    }
}
