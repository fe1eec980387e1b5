//! The autoregressive model contract and its two backends.
//!
//! A model consumes one input embedding per step, which need not be a row of
//! its embedding table: soft and regularized embeddings are fed through the
//! same path as discrete tokens. Every step exposes the per-layer residual
//! stream so the logit lens can project intermediate layers.

mod scripted;
mod toy;
pub mod weights;

pub use scripted::{forced_logits, ScriptedModel, ScriptedState, FORBIDDEN_LOGIT};
pub use toy::{ToyState, ToyTransformer, ToyTransformerConfig};

use crate::dist::{EmbeddingTable, EmbeddingVector, Logits, TokenId};
use crate::error::{Error, Result};

/// Per-layer hidden states for the most recent step, one vector per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivations {
    hidden: Vec<Vec<f64>>,
}

impl LayerActivations {
    pub fn new(hidden: Vec<Vec<f64>>) -> Result<Self> {
        if hidden.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("layer activations are not finite".into()));
        }
        Ok(LayerActivations { hidden })
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn layer(&self, layer: usize) -> Option<&[f64]> {
        self.hidden.get(layer).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.hidden.iter().map(Vec::as_slice)
    }
}

/// What one forward step produces.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logits: Logits,
    pub activations: LayerActivations,
}

/// Incremental per-sequence state. Cloning a state is a snapshot: the clone
/// evolves independently of the original.
pub trait ModelState: Clone + Send {
    /// Number of embeddings consumed so far.
    fn position(&self) -> usize;

    /// Output of the most recent step, if any step has run.
    fn last_output(&self) -> Option<&StepOutput>;
}

pub trait LanguageModel: Sync {
    type State: ModelState;

    fn vocab_size(&self) -> usize;

    fn num_layers(&self) -> usize;

    fn context_len(&self) -> usize;

    fn embeddings(&self) -> &EmbeddingTable;

    fn embed_dim(&self) -> usize {
        self.embeddings().dim()
    }

    /// A state that has consumed nothing.
    fn empty_state(&self) -> Self::State;

    /// Feeds one input embedding, advancing the state by one position.
    fn step(&self, state: &mut Self::State, input: &EmbeddingVector) -> Result<StepOutput>;

    /// Projects a hidden state from `layer` through the final normalization
    /// and the unembedding.
    fn logit_lens(&self, activation: &[f64], layer: usize) -> Result<Logits>;

    /// Whether per-layer activations are meaningful for lens analysis.
    fn supports_layer_access(&self) -> bool {
        true
    }

    /// Consumes the prompt's token embeddings.
    fn init_state(&self, prompt: &[TokenId]) -> Result<Self::State> {
        if prompt.len() >= self.context_len() {
            return Err(Error::ContextOverflow {
                position: prompt.len(),
                context_len: self.context_len(),
            });
        }
        let mut state = self.empty_state();
        for &token in prompt {
            let e = self.embeddings().embedding(token)?;
            self.step(&mut state, &e)?;
        }
        Ok(state)
    }

    fn snapshot(&self, state: &Self::State) -> Self::State {
        state.clone()
    }

    fn restore(&self, snapshot: &Self::State) -> Self::State {
        snapshot.clone()
    }
}

pub(crate) fn check_step(
    position: usize,
    context_len: usize,
    input: &EmbeddingVector,
    dim: usize,
) -> Result<()> {
    if input.dim() != dim {
        return Err(Error::InvalidInput(format!(
            "input embedding has dimension {}, model expects {dim}",
            input.dim()
        )));
    }
    if position >= context_len {
        return Err(Error::ContextOverflow {
            position,
            context_len,
        });
    }
    Ok(())
}
