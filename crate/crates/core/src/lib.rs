//! Entropy-gated latent decoding.
//!
//! At each step the controller measures the normalized entropy of the
//! renormalized top-k candidates. Confident steps decode a discrete token as
//! usual; uncertain steps feed the model a probability-weighted mixture of
//! the candidate embeddings, pushed away from the dominant token so the
//! mixture does not collapse onto a single path.
//!
//! Modules:
//! - [`dist`]: token ids, logits, distributions, top-k renormalization.
//! - [`gate`]: truncated entropy and the gate decision.
//! - [`latent`]: soft embeddings and contrastive regularization.
//! - [`model`]: the model contract, a toy transformer and a scripted oracle.
//! - [`decode`]: the gated controller and the baselines, plus JSONL traces.
//! - [`analysis`]: histograms, activation frequency, lens overlap, metrics.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod decode;
pub mod dist;
pub mod error;
pub mod gate;
pub mod latent;
pub mod model;

pub use error::{Error, FormatError, Result};
