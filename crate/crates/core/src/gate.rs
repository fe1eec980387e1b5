//! Truncated-entropy uncertainty estimate and the deterministic/exploratory
//! gate built on it.

use serde::{Deserialize, Serialize};

use crate::dist::TopKCandidates;
use crate::error::{Error, Result};

/// Entropy of a top-k candidate set, raw (nats) and normalized by `ln k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReading {
    pub raw: f64,
    pub normalized: f64,
    pub k: usize,
}

impl EntropyReading {
    /// Reads the entropy of `candidates`. A single candidate is certain by
    /// construction and reads zero on both scales.
    pub fn of(candidates: &TopKCandidates) -> Self {
        let raw = truncated_entropy(candidates);
        let k = candidates.k();
        let normalized = if k < 2 {
            0.0
        } else {
            clamp_unit(raw / libm::log(k as f64))
        };
        EntropyReading { raw, normalized, k }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Deterministic,
    Exploratory,
}

impl GateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::Deterministic => "deterministic",
            GateMode::Exploratory => "exploratory",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub mode: GateMode,
    pub threshold: f64,
    pub reading: EntropyReading,
}

impl GateDecision {
    pub fn is_exploratory(&self) -> bool {
        self.mode == GateMode::Exploratory
    }
}

/// `-Σ p̂ ln p̂` over the candidates, with `0 ln 0 = 0`.
pub fn truncated_entropy(candidates: &TopKCandidates) -> f64 {
    let h: f64 = candidates
        .probs()
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * libm::log(*p))
        .sum();
    // rounding can leave a one-hot set at -0.0 or a hair below zero
    h.max(0.0)
}

/// `clamp(h / ln k, 0, 1)`.
pub fn normalized_entropy(h: f64, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "entropy normalization needs k >= 2, got {k}"
        )));
    }
    if !(h >= 0.0) {
        return Err(Error::InvalidInput(format!("entropy must be >= 0, got {h}")));
    }
    Ok(clamp_unit(h / libm::log(k as f64)))
}

/// Steps at or below the threshold stay discrete; only strictly higher
/// entropy opens the gate.
pub fn gate_decision(reading: EntropyReading, tau: f64) -> Result<GateDecision> {
    check_tau(tau)?;
    let mode = if reading.normalized <= tau {
        GateMode::Deterministic
    } else {
        GateMode::Exploratory
    };
    Ok(GateDecision {
        mode,
        threshold: tau,
        reading,
    })
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidParameter(format!(
            "threshold tau must lie in [0, 1], got {tau}"
        )));
    }
    Ok(())
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}
