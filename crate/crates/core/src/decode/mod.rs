//! Decode controllers: the entropy-gated latent controller, chain-of-thought
//! greedy and sampling baselines, and global soft thinking.
//!
//! Every controller runs the same loop. Each step reads the last logits,
//! applies the temperature softmax, takes the top-`gate_k` candidates and
//! their truncated entropy, samples (or argmaxes) a readable token, picks the
//! next input embedding, and stops on EOS or the step budget. Only the input
//! choice differs between methods, so a shared seed consumes the random
//! stream identically across them.

mod sampler;
pub mod trace;

pub use sampler::{filter_distribution, sample, SamplerConfig};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{softmax, topk_renormalize, EmbeddingVector, ProbDist, TokenId, TopKCandidates};
use crate::error::{Error, Result};
use crate::gate::{check_tau, gate_decision, EntropyReading, GateDecision};
use crate::latent::{contrastive_regularize, full_soft_embedding, soft_embedding, RegularizationConfig};
use crate::model::{LanguageModel, ModelState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// Entropy-gated soft embeddings with contrastive regularization.
    #[serde(rename = "selar")]
    GatedLatent,
    #[serde(rename = "cot_greedy")]
    CotGreedy,
    #[serde(rename = "cot_sampling")]
    CotSampling,
    /// Soft embedding at every step, no gate, no regularization.
    #[serde(rename = "soft_thinking")]
    SoftThinking,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::GatedLatent,
        Method::CotGreedy,
        Method::CotSampling,
        Method::SoftThinking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GatedLatent => "selar",
            Method::CotGreedy => "cot_greedy",
            Method::CotSampling => "cot_sampling",
            Method::SoftThinking => "soft_thinking",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Discrete,
    Soft,
    SoftRegularized,
}

impl InputMode {
    pub fn is_latent(self) -> bool {
        !matches!(self, InputMode::Discrete)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Discrete => "discrete",
            InputMode::Soft => "soft",
            InputMode::SoftRegularized => "soft_regularized",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub method: Method,
    pub tau: f64,
    pub gate_k: usize,
    pub max_steps: usize,
    pub eos_token: TokenId,
    /// Answer span starts after the last occurrence of this token.
    pub separator_token: Option<TokenId>,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub regularization: RegularizationConfig,
    /// `false` with the gated method feeds a latent input at every step.
    pub gating_enabled: bool,
    /// Soft thinking mixes over the whole vocabulary instead of the top
    /// `gate_k` candidates.
    pub soft_full_vocab: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            method: Method::GatedLatent,
            tau: 0.5,
            gate_k: 3,
            max_steps: 64,
            eos_token: TokenId(127),
            separator_token: None,
            seed: 0,
            sampler: SamplerConfig::default(),
            regularization: RegularizationConfig::default(),
            gating_enabled: true,
            soft_full_vocab: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        check_tau(self.tau)?;
        let min_k = if self.method == Method::GatedLatent { 2 } else { 1 };
        if self.gate_k < min_k || self.gate_k > vocab_size {
            return Err(Error::InvalidParameter(format!(
                "gate_k must lie in {min_k}..={vocab_size} for {}, got {}",
                self.method, self.gate_k
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be at least 1".into()));
        }
        if self.eos_token.index() >= vocab_size {
            return Err(Error::InvalidParameter(format!(
                "eos_token {} outside vocabulary of {vocab_size}",
                self.eos_token
            )));
        }
        if let Some(sep) = self.separator_token {
            if sep.index() >= vocab_size {
                return Err(Error::InvalidParameter(format!(
                    "separator_token {sep} outside vocabulary of {vocab_size}"
                )));
            }
        }
        self.sampler.validate()?;
        self.regularization.validate()
    }
}

/// One decoding step as recorded in a transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub entropy: EntropyReading,
    /// Absent when no gate was evaluated (baselines, gating disabled).
    pub gate: Option<GateDecision>,
    pub token: TokenId,
    pub mode: InputMode,
    /// Top-`gate_k` candidates with renormalized probabilities.
    pub candidates: TopKCandidates,
}

impl StepTrace {
    pub fn dominant_prob(&self) -> f64 {
        self.candidates.probs()[0]
    }

    pub fn runner_up_prob(&self) -> Option<f64> {
        self.candidates.probs().get(1).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transcript {
    pub config: DecodeConfig,
    pub prompt: Vec<TokenId>,
    pub steps: Vec<StepTrace>,
    pub termination: Termination,
    /// Sampled token per step, EOS included when it ended the run.
    pub tokens: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    /// Input embedding chosen at each step. Kept in memory only; traces
    /// loaded from disk leave this empty.
    pub inputs: Vec<EmbeddingVector>,
}

impl Transcript {
    pub fn latent_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.mode.is_latent()).count()
    }
}

/// Tokens after the last separator (all tokens when no separator is set),
/// excluding a trailing EOS. A configured separator that never appears gives
/// an empty answer.
pub fn extract_answer(tokens: &[TokenId], eos: TokenId, separator: Option<TokenId>) -> Vec<TokenId> {
    let body = match tokens.last() {
        Some(t) if *t == eos => &tokens[..tokens.len() - 1],
        _ => tokens,
    };
    match separator {
        None => body.to_vec(),
        Some(sep) => match body.iter().rposition(|t| *t == sep) {
            Some(i) => body[i + 1..].to_vec(),
            None => Vec::new(),
        },
    }
}

/// Runs the controller named by `cfg.method` with a ChaCha stream seeded
/// from `cfg.seed`.
pub fn decode<M: LanguageModel>(model: &M, prompt: &[TokenId], cfg: &DecodeConfig) -> Result<Transcript> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    run(model, prompt, cfg, &mut rng)
}

/// Entropy-gated latent decoding. Deterministic steps feed the sampled
/// token's embedding; exploratory steps feed the top-k soft embedding pushed
/// away from the dominant token.
pub fn gated_latent_decode<M: LanguageModel, R: Rng + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Transcript> {
    expect_method(cfg, &[Method::GatedLatent])?;
    run(model, prompt, cfg, rng)
}

/// Standard discrete decoding, greedy or sampled according to `cfg.method`.
pub fn cot_decode<M: LanguageModel, R: Rng + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Transcript> {
    expect_method(cfg, &[Method::CotGreedy, Method::CotSampling])?;
    run(model, prompt, cfg, rng)
}

/// Soft embedding at every step.
pub fn soft_thinking_decode<M: LanguageModel, R: Rng + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Transcript> {
    expect_method(cfg, &[Method::SoftThinking])?;
    run(model, prompt, cfg, rng)
}

fn expect_method(cfg: &DecodeConfig, allowed: &[Method]) -> Result<()> {
    if allowed.contains(&cfg.method) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "controller does not handle method {}",
            cfg.method
        )))
    }
}

/// The embedding fed for a step with the given input mode.
pub(crate) fn step_input<M: LanguageModel>(
    model: &M,
    cfg: &DecodeConfig,
    mode: InputMode,
    token: TokenId,
    dist: &ProbDist,
    candidates: &TopKCandidates,
    entropy: EntropyReading,
) -> Result<EmbeddingVector> {
    let table = model.embeddings();
    match mode {
        InputMode::Discrete => table.embedding(token),
        InputMode::Soft if cfg.method == Method::SoftThinking && cfg.soft_full_vocab => {
            full_soft_embedding(dist, table)
        }
        InputMode::Soft => soft_embedding(candidates, table),
        InputMode::SoftRegularized => {
            let e = soft_embedding(candidates, table)?;
            let dominant = table.embedding(candidates.dominant())?;
            let reg = RegularizationConfig {
                enabled: true,
                ..cfg.regularization
            };
            contrastive_regularize(&e, &dominant, entropy.normalized, &reg)
        }
    }
}

/// Dispatches on `cfg.method` with a caller-supplied random stream.
pub fn run<M: LanguageModel, R: Rng + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Transcript> {
    cfg.validate(model.vocab_size())?;
    if prompt.is_empty() {
        return Err(Error::InvalidInput("prompt must contain at least one token".into()));
    }
    let mut state = model.init_state(prompt)?;
    let mut steps = Vec::new();
    let mut tokens = Vec::new();
    let mut inputs = Vec::new();
    let mut termination = Termination::MaxSteps;

    for t in 0..cfg.max_steps {
        let logits = &state
            .last_output()
            .expect("a non-empty prompt leaves an output behind")
            .logits;
        let dist = softmax(logits, cfg.sampler.temperature)?;
        let candidates = topk_renormalize(&dist, cfg.gate_k)?;
        let entropy = EntropyReading::of(&candidates);

        let token = match cfg.method {
            Method::CotGreedy => dist.argmax(),
            _ => sample(&filter_distribution(&dist, &cfg.sampler)?, rng),
        };

        let gate = match cfg.method {
            Method::GatedLatent if cfg.gating_enabled => Some(gate_decision(entropy, cfg.tau)?),
            _ => None,
        };
        let latent = match cfg.method {
            Method::CotGreedy | Method::CotSampling => false,
            Method::SoftThinking => true,
            Method::GatedLatent => gate.is_none_or(|g| g.is_exploratory()),
        };

        let mode = if !latent {
            InputMode::Discrete
        } else if cfg.method == Method::SoftThinking || !cfg.regularization.enabled {
            InputMode::Soft
        } else {
            InputMode::SoftRegularized
        };
        let input = step_input(model, cfg, mode, token, &dist, &candidates, entropy)?;

        steps.push(StepTrace {
            step: t,
            entropy,
            gate,
            token,
            mode,
            candidates,
        });
        tokens.push(token);

        if token == cfg.eos_token {
            inputs.push(input);
            termination = Termination::Eos;
            break;
        }
        if t + 1 == cfg.max_steps || state.position() >= model.context_len() {
            inputs.push(input);
            break;
        }
        model.step(&mut state, &input)?;
        inputs.push(input);
    }

    let answer = extract_answer(&tokens, cfg.eos_token, cfg.separator_token);
    Ok(Transcript {
        config: cfg.clone(),
        prompt: prompt.to_vec(),
        steps,
        termination,
        tokens,
        answer,
        inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{EmbeddingTable, ProbDist};
    use crate::model::{forced_logits, ScriptedModel};

    fn t(ids: &[u32]) -> Vec<TokenId> {
        ids.iter().map(|&i| TokenId(i)).collect()
    }

    #[test]
    fn answer_extraction() {
        let eos = TokenId(9);
        assert_eq!(extract_answer(&t(&[1, 2, 8, 5, 9]), eos, Some(TokenId(8))), t(&[5]));
        assert_eq!(extract_answer(&t(&[1, 8, 2, 8, 5, 6]), eos, Some(TokenId(8))), t(&[5, 6]));
        assert_eq!(extract_answer(&t(&[1, 2, 9]), eos, None), t(&[1, 2]));
        assert!(extract_answer(&t(&[1, 2, 9]), eos, Some(TokenId(8))).is_empty());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("beam".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = DecodeConfig::default();
        assert!(ok.validate(128).is_ok());
        assert!(DecodeConfig { tau: 1.2, ..ok.clone() }.validate(128).is_err());
        assert!(DecodeConfig { gate_k: 1, ..ok.clone() }.validate(128).is_err());
        let soft = DecodeConfig { method: Method::SoftThinking, gate_k: 1, ..ok.clone() };
        assert!(soft.validate(128).is_ok());
        assert!(DecodeConfig { max_steps: 0, ..ok.clone() }.validate(128).is_err());
        assert!(DecodeConfig { eos_token: TokenId(128), ..ok }.validate(128).is_err());
    }

    /// Scripted model forcing a one-hot step then a uniform-over-3 step.
    fn two_step_model() -> ScriptedModel {
        let v = 5;
        let rows: Vec<Vec<f64>> = (0..v).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let table = EmbeddingTable::from_rows(&rows).unwrap();
        let schedule = vec![
            forced_logits(&ProbDist::one_hot(v, TokenId(2)).unwrap()),
            forced_logits(&ProbDist::new(vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0]).unwrap()),
            forced_logits(&ProbDist::one_hot(v, TokenId(4)).unwrap()),
        ];
        ScriptedModel::table_driven(table, 32)
            .unwrap()
            .with_schedule(1, schedule)
            .unwrap()
    }

    #[test]
    fn forced_one_hot_then_uniform() {
        let m = two_step_model();
        let cfg = DecodeConfig { eos_token: TokenId(4), max_steps: 10, ..Default::default() };
        let tr = decode(&m, &t(&[0]), &cfg).unwrap();
        let modes: Vec<_> = tr.steps.iter().map(|s| s.mode).collect();
        assert_eq!(
            modes,
            [InputMode::Discrete, InputMode::SoftRegularized, InputMode::Discrete]
        );
        assert_eq!(tr.steps[0].entropy.normalized, 0.0);
        assert!((tr.steps[1].entropy.normalized - 1.0).abs() < 1e-9);
        assert_eq!(tr.termination, Termination::Eos);
        assert_eq!(tr.tokens.last(), Some(&TokenId(4)));

        // oracle for the regularized input: e = mean of rows 0..3, pushed
        // away from row 0 by (H̄ = 1)·Δ·|Δ|/(|Δ|+ε)
        let e: [f64; 2] = [1.0, (0.0 + 0.1 + 0.4) / 3.0];
        let delta = [e[0] - 0.0, e[1] - 0.0];
        let n = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
        let f = n / (n + 1e-6);
        let expected = [e[0] + delta[0] * f, e[1] + delta[1] * f];
        let got = tr.inputs[1].values();
        assert!((got[0] - expected[0]).abs() < 1e-12);
        assert!((got[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn eos_and_budget_termination() {
        let m = two_step_model();
        let cfg = DecodeConfig { eos_token: TokenId(4), max_steps: 2, ..Default::default() };
        let tr = decode(&m, &t(&[0]), &cfg).unwrap();
        assert_eq!(tr.steps.len(), 2);
        assert_eq!(tr.termination, Termination::MaxSteps);
        assert_eq!(tr.inputs.len(), 2);
    }

    #[test]
    fn context_exhaustion_truncates() {
        let m = ScriptedModel::random_linear(8, 4, 4, 9).unwrap();
        let cfg = DecodeConfig { eos_token: TokenId(7), max_steps: 50, tau: 1.0, ..Default::default() };
        let tr = decode(&m, &t(&[1, 2]), &cfg).unwrap();
        assert!(tr.steps.len() <= 3);
        if tr.tokens.last() != Some(&TokenId(7)) {
            assert_eq!(tr.termination, Termination::MaxSteps);
        }
    }

    #[test]
    fn empty_prompt_rejected() {
        let m = two_step_model();
        let cfg = DecodeConfig { eos_token: TokenId(4), ..Default::default() };
        assert!(matches!(decode(&m, &[], &cfg), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn controllers_check_method() {
        let m = two_step_model();
        let cfg = DecodeConfig { eos_token: TokenId(4), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(cot_decode(&m, &t(&[0]), &cfg, &mut rng).is_err());
        assert!(soft_thinking_decode(&m, &t(&[0]), &cfg, &mut rng).is_err());
        assert!(gated_latent_decode(&m, &t(&[0]), &cfg, &mut rng).is_ok());
    }

    #[test]
    fn disabled_gating_goes_latent_everywhere() {
        let m = two_step_model();
        let cfg = DecodeConfig { eos_token: TokenId(4), gating_enabled: false, ..Default::default() };
        let tr = decode(&m, &t(&[0]), &cfg).unwrap();
        assert!(tr.steps.iter().all(|s| s.mode == InputMode::SoftRegularized && s.gate.is_none()));
    }

    #[test]
    fn soft_thinking_with_k1_feeds_argmax_rows() {
        let m = ScriptedModel::random_linear(10, 4, 64, 3).unwrap();
        let cfg = DecodeConfig {
            method: Method::SoftThinking,
            gate_k: 1,
            eos_token: TokenId(9),
            max_steps: 12,
            ..Default::default()
        };
        let tr = decode(&m, &t(&[1]), &cfg).unwrap();
        for (s, e) in tr.steps.iter().zip(&tr.inputs) {
            assert_eq!(e.values(), m.embeddings().row(s.candidates.dominant()).unwrap());
        }
    }
}
