//! Truncation filters and inverse-CDF sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{ProbDist, TokenId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub min_p: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 0.6,
            top_p: 0.95,
            top_k: 20,
            min_p: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidParameter("top_k must be at least 1".into()));
        }
        if !(self.min_p >= 0.0 && self.min_p < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "min_p must lie in [0, 1), got {}",
                self.min_p
            )));
        }
        Ok(())
    }
}

/// Applies top-k, then the min-p floor, then the top-p nucleus, and
/// renormalizes what survives. The nucleus is measured on the mass left
/// after the first two filters. The argmax always survives.
pub fn filter_distribution(dist: &ProbDist, s: &SamplerConfig) -> Result<ProbDist> {
    s.validate()?;
    let ranked = dist.ranked();
    let mut kept: Vec<TokenId> = ranked.into_iter().take(s.top_k).collect();

    let max_p = dist.prob(kept[0]);
    let floor = s.min_p * max_p;
    kept.retain(|t| dist.prob(*t) >= floor);

    let mass: f64 = kept.iter().map(|t| dist.prob(*t)).sum();
    let target = s.top_p * mass - 1e-12;
    let mut cumulative = 0.0;
    let mut cut = kept.len();
    for (i, t) in kept.iter().enumerate() {
        cumulative += dist.prob(*t);
        if cumulative >= target {
            cut = i + 1;
            break;
        }
    }
    kept.truncate(cut);

    let total: f64 = kept.iter().map(|t| dist.prob(*t)).sum();
    let mut probs = vec![0.0; dist.len()];
    if total > 0.0 {
        for t in &kept {
            probs[t.index()] = dist.prob(*t) / total;
        }
    } else {
        probs[kept[0].index()] = 1.0;
    }
    ProbDist::new(probs)
}

/// Inverse-CDF draw using one uniform from `rng`.
pub fn sample<R: Rng + ?Sized>(dist: &ProbDist, rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last = None;
    for (i, p) in dist.probs().iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        cumulative += p;
        last = Some(i);
        if u < cumulative {
            return TokenId(i as u32);
        }
    }
    // u landed in the rounding gap above the final cumulative sum
    TokenId(last.unwrap_or(0) as u32)
}
