//! Soft embeddings and the entropy-scaled contrastive push away from the
//! dominant token.

use serde::{Deserialize, Serialize};

use crate::dist::{norm, EmbeddingTable, EmbeddingVector, ProbDist, TokenId, TopKCandidates};
use crate::error::{Error, Result};

/// Default `ε` in the unit-direction denominator.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationConfig {
    pub epsilon: f64,
    pub enabled: bool,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig {
            epsilon: DEFAULT_EPSILON,
            enabled: true,
        }
    }
}

impl RegularizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "regularization epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// `Σ p̂(v)·e_v` over the candidate set.
pub fn soft_embedding(candidates: &TopKCandidates, table: &EmbeddingTable) -> Result<EmbeddingVector> {
    mix(candidates.iter(), table)
}

/// Full-vocabulary mixture `Σ_v p(v)·e_v`.
pub fn full_soft_embedding(dist: &ProbDist, table: &EmbeddingTable) -> Result<EmbeddingVector> {
    if dist.len() != table.vocab_size() {
        return Err(Error::InvalidInput(format!(
            "distribution over {} tokens, table has {} rows",
            dist.len(),
            table.vocab_size()
        )));
    }
    let weights = dist
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > 0.0)
        .map(|(i, p)| (TokenId(i as u32), *p));
    mix(weights, table)
}

fn mix(
    weights: impl Iterator<Item = (TokenId, f64)>,
    table: &EmbeddingTable,
) -> Result<EmbeddingVector> {
    let mut out = vec![0.0; table.dim()];
    for (token, p) in weights {
        let row = table.row(token)?;
        for (o, e) in out.iter_mut().zip(row) {
            *o += p * e;
        }
    }
    EmbeddingVector::new(out)
}

/// Pushes `e` away from `dominant` by `H̄·Δ̂·‖Δ‖` where `Δ = e − dominant` and
/// `Δ̂ = Δ / (‖Δ‖ + ε)`. Returns `e` untouched when regularization is off.
pub fn contrastive_regularize(
    e: &EmbeddingVector,
    dominant: &EmbeddingVector,
    normalized_entropy: f64,
    cfg: &RegularizationConfig,
) -> Result<EmbeddingVector> {
    if e.dim() != dominant.dim() {
        return Err(Error::InvalidInput(format!(
            "embedding dimensions differ: {} vs {}",
            e.dim(),
            dominant.dim()
        )));
    }
    if !(0.0..=1.0).contains(&normalized_entropy) {
        return Err(Error::InvalidInput(format!(
            "normalized entropy must lie in [0, 1], got {normalized_entropy}"
        )));
    }
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(e.clone());
    }
    let delta: Vec<f64> = e
        .values()
        .iter()
        .zip(dominant.values())
        .map(|(a, b)| a - b)
        .collect();
    let len = norm(&delta);
    let denom = len + cfg.epsilon;
    let out = e
        .values()
        .iter()
        .zip(&delta)
        .map(|(x, d)| x + normalized_entropy * (d / denom) * len)
        .collect();
    EmbeddingVector::new(out)
}
