//! Vocabulary-level numeric types and the distribution transforms the rest of
//! the crate is built on.
//!
//! Probability arithmetic is done in `f64` throughout. Ties between equal
//! probabilities are always broken in favour of the lowest token id so that
//! traces are reproducible.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σp = 1` accepted by [`ProbDist`] and [`TopKCandidates`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Index into the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(id: u32) -> Self {
        TokenId(id)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Raw next-token scores, one per vocabulary entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("logits are empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "logit {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Logits(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest logit, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        TokenId(argmax(&self.0) as u32)
    }

    /// The `k` highest-scoring ids in descending order.
    pub fn top_ids(&self, k: usize) -> Vec<TokenId> {
        ranked_indices(&self.0)
            .into_iter()
            .take(k)
            .map(|i| TokenId(i as u32))
            .collect()
    }
}

/// A probability vector over the whole vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("distribution is empty".into()));
        }
        if let Some(i) = probs
            .iter()
            .position(|p| !p.is_finite() || *p < 0.0 || *p > 1.0 + SUM_TOLERANCE)
        {
            return Err(Error::InvalidInput(format!(
                "probability {i} out of range ({})",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(ProbDist(probs))
    }

    /// One-hot distribution on `token`.
    pub fn one_hot(vocab_size: usize, token: TokenId) -> Result<Self> {
        if token.index() >= vocab_size {
            return Err(Error::InvalidInput(format!(
                "token {token} outside vocabulary of {vocab_size}"
            )));
        }
        let mut probs = vec![0.0; vocab_size];
        probs[token.index()] = 1.0;
        Ok(ProbDist(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.0[token.index()]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> TokenId {
        TokenId(argmax(&self.0) as u32)
    }

    /// Token ids ordered by descending probability, lowest id first on ties.
    pub fn ranked(&self) -> Vec<TokenId> {
        ranked_indices(&self.0)
            .into_iter()
            .map(|i| TokenId(i as u32))
            .collect()
    }
}

/// The top-k tokens of a distribution with their probabilities renormalized
/// to sum to one. `tokens[0]` is the dominant token, `tokens[1]` the runner-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKCandidates {
    tokens: Vec<TokenId>,
    probs: Vec<f64>,
}

impl TopKCandidates {
    /// Builds a candidate set from explicit values, checking every invariant.
    pub fn new(tokens: Vec<TokenId>, probs: Vec<f64>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("candidate set is empty".into()));
        }
        if tokens.len() != probs.len() {
            return Err(Error::InvalidInput(format!(
                "{} tokens but {} probabilities",
                tokens.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidInput("candidate probability out of range".into()));
        }
        if probs.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidInput(
                "candidate probabilities must be non-increasing".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "candidate probabilities sum to {total}, not 1"
            )));
        }
        let mut seen = tokens.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("candidate tokens are not distinct".into()));
        }
        Ok(TopKCandidates { tokens, probs })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.tokens.len()
    }

    pub fn dominant(&self) -> TokenId {
        self.tokens[0]
    }

    pub fn runner_up(&self) -> Option<TokenId> {
        self.tokens.get(1).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.tokens.iter().copied().zip(self.probs.iter().copied())
    }
}

/// A point in embedding space. Mixtures and regularized embeddings live here
/// too, not only rows of the table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding has non-finite entries".into()));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// The `|V| × d` token embedding matrix, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(vocab_size: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::InvalidParameter(
                "embedding table needs a positive vocabulary and dimension".into(),
            ));
        }
        if data.len() != vocab_size * dim {
            return Err(Error::InvalidInput(format!(
                "embedding table expects {} values, got {}",
                vocab_size * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding table has non-finite entries".into()));
        }
        Ok(EmbeddingTable { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInput("embedding rows differ in length".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn vocab_size(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, token: TokenId) -> Result<&[f64]> {
        let i = token.index();
        if i >= self.vocab_size() {
            return Err(Error::InvalidInput(format!(
                "token {token} outside embedding table of {} rows",
                self.vocab_size()
            )));
        }
        Ok(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Row-major `|V| × d` values.
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Owned copy of the embedding for `token`.
    pub fn embedding(&self, token: TokenId) -> Result<EmbeddingVector> {
        Ok(EmbeddingVector(self.row(token)?.to_vec()))
    }
}

/// Temperature-scaled softmax with max subtraction.
pub fn softmax(logits: &Logits, temperature: f64) -> Result<ProbDist> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let values = logits.values();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("logits contain non-finite values".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = values
        .iter()
        .map(|v| libm::exp((v - max) / temperature))
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(ProbDist(probs))
}

/// Keeps the `k` most probable tokens and renormalizes their mass.
pub fn topk_renormalize(dist: &ProbDist, k: usize) -> Result<TopKCandidates> {
    if k == 0 || k > dist.len() {
        return Err(Error::InvalidParameter(format!(
            "k must lie in 1..={}, got {k}",
            dist.len()
        )));
    }
    let tokens: Vec<TokenId> = dist.ranked().into_iter().take(k).collect();
    let mass: f64 = tokens.iter().map(|t| dist.prob(*t)).sum();
    if !(mass > 0.0) {
        return Err(Error::DegenerateDistribution(format!(
            "top-{k} candidates carry no probability mass"
        )));
    }
    let probs = tokens.iter().map(|t| dist.prob(*t) / mass).collect();
    Ok(TopKCandidates { tokens, probs })
}

/// Indices sorted by descending value; equal values keep ascending index order.
pub(crate) fn ranked_indices(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}
