//! Affine scripted model: `logits = W·e + b + s[t]`.
//!
//! With no schedule the model is exactly linear in its input, which makes the
//! logits after a mixture embedding analytically predictable. The optional
//! schedule adds forced per-step logits, keyed by decode step, so task suites
//! can pin the output distribution at chosen steps. The single "layer" exposes
//! the input embedding as its activation; the lens ignores the schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_step, LanguageModel, LayerActivations, ModelState, StepOutput};
use crate::dist::{EmbeddingTable, EmbeddingVector, Logits, ProbDist};
use crate::error::{Error, Result};

/// Logit assigned to zero-probability tokens of a forced distribution. Far
/// enough below zero that `exp` underflows to exactly zero at any sane
/// temperature.
pub const FORBIDDEN_LOGIT: f64 = -1e4;

/// Log-probabilities of `dist`, with [`FORBIDDEN_LOGIT`] for zeros. Any
/// temperature leaves uniform and one-hot distributions unchanged.
pub fn forced_logits(dist: &ProbDist) -> Logits {
    let values = dist
        .probs()
        .iter()
        .map(|p| if *p > 0.0 { libm::log(*p) } else { FORBIDDEN_LOGIT })
        .collect();
    Logits::new(values).expect("log-probabilities are finite")
}

#[derive(Clone, Debug)]
pub struct ScriptedModel {
    embeddings: EmbeddingTable,
    /// `[vocab, d]`, row per output token.
    weight: Vec<f64>,
    bias: Vec<f64>,
    schedule: Vec<Logits>,
    schedule_start: usize,
    context_len: usize,
}

#[derive(Clone, Debug)]
pub struct ScriptedState {
    position: usize,
    last: Option<StepOutput>,
}

impl ModelState for ScriptedState {
    fn position(&self) -> usize {
        self.position
    }

    fn last_output(&self) -> Option<&StepOutput> {
        self.last.as_ref()
    }
}

impl ScriptedModel {
    pub fn linear(
        embeddings: EmbeddingTable,
        weight: Vec<f64>,
        bias: Vec<f64>,
        context_len: usize,
    ) -> Result<Self> {
        let v = embeddings.vocab_size();
        let d = embeddings.dim();
        if weight.len() != v * d {
            return Err(Error::InvalidInput(format!(
                "weight needs {} values, got {}",
                v * d,
                weight.len()
            )));
        }
        if bias.len() != v {
            return Err(Error::InvalidInput(format!(
                "bias needs {v} values, got {}",
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("scripted weights are not finite".into()));
        }
        if context_len == 0 {
            return Err(Error::InvalidParameter("context_len must be positive".into()));
        }
        Ok(ScriptedModel {
            embeddings,
            weight,
            bias,
            schedule: Vec::new(),
            schedule_start: 0,
            context_len,
        })
    }

    /// Random embeddings, weights and bias from a seeded stream.
    pub fn random_linear(vocab_size: usize, dim: usize, context_len: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, bound: f64| -> Vec<f64> {
            (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect()
        };
        let emb = draw(vocab_size * dim, 1.0);
        let weight = draw(vocab_size * dim, 1.0 / (dim as f64).sqrt());
        let bias = draw(vocab_size, 0.5);
        Self::linear(EmbeddingTable::new(vocab_size, dim, emb)?, weight, bias, context_len)
    }

    /// Zero weight and bias: logits come only from the schedule.
    pub fn table_driven(embeddings: EmbeddingTable, context_len: usize) -> Result<Self> {
        let v = embeddings.vocab_size();
        let d = embeddings.dim();
        Self::linear(embeddings, vec![0.0; v * d], vec![0.0; v], context_len)
    }

    /// Forces `schedule[t]` onto the logits of decode step `t`, where step 0
    /// is the distribution produced right after a `prompt_len`-token prompt.
    pub fn with_schedule(mut self, prompt_len: usize, schedule: Vec<Logits>) -> Result<Self> {
        let v = self.embeddings.vocab_size();
        if let Some(bad) = schedule.iter().find(|l| l.len() != v) {
            return Err(Error::InvalidInput(format!(
                "scheduled logits have {} entries, vocabulary is {v}",
                bad.len()
            )));
        }
        self.schedule = schedule;
        self.schedule_start = prompt_len;
        Ok(self)
    }

    /// `W·e + b`, the unscheduled affine map.
    pub fn affine(&self, input: &[f64]) -> Vec<f64> {
        let d = self.embeddings.dim();
        self.weight
            .chunks_exact(d)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

impl LanguageModel for ScriptedModel {
    type State = ScriptedState;

    fn vocab_size(&self) -> usize {
        self.embeddings.vocab_size()
    }

    fn num_layers(&self) -> usize {
        1
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    fn empty_state(&self) -> ScriptedState {
        ScriptedState {
            position: 0,
            last: None,
        }
    }

    fn step(&self, state: &mut ScriptedState, input: &EmbeddingVector) -> Result<StepOutput> {
        check_step(state.position, self.context_len, input, self.embeddings.dim())?;
        state.position += 1;
        let mut logits = self.affine(input.values());
        let forced = state
            .position
            .checked_sub(self.schedule_start)
            .and_then(|t| self.schedule.get(t));
        if let Some(forced) = forced {
            for (l, f) in logits.iter_mut().zip(forced.values()) {
                *l += f;
            }
        }
        let out = StepOutput {
            logits: Logits::new(logits)?,
            activations: LayerActivations::new(vec![input.values().to_vec()])?,
        };
        state.last = Some(out.clone());
        Ok(out)
    }

    fn logit_lens(&self, activation: &[f64], layer: usize) -> Result<Logits> {
        if layer != 0 {
            return Err(Error::InvalidParameter(format!(
                "layer {layer} out of range for 1 layer"
            )));
        }
        if activation.len() != self.embeddings.dim() {
            return Err(Error::InvalidInput(format!(
                "activation has dimension {}, model expects {}",
                activation.len(),
                self.embeddings.dim()
            )));
        }
        Logits::new(self.affine(activation))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::TokenId;

    #[test]
    fn token_input_gives_affine_logits() {
        let m = ScriptedModel::random_linear(6, 3, 16, 1).unwrap();
        let mut s = m.empty_state();
        let e = m.embeddings().embedding(TokenId(4)).unwrap();
        let out = m.step(&mut s, &e).unwrap();
        let row = m.embeddings().row(TokenId(4)).unwrap();
        for v in 0..6 {
            let expected: f64 = (0..3).map(|j| m.weight[v * 3 + j] * row[j]).sum::<f64>() + m.bias[v];
            assert_eq!(out.logits.values()[v], expected);
        }
        assert_eq!(out.activations.num_layers(), 1);
        assert_eq!(out.activations.layer(0).unwrap(), row);
    }

    #[test]
    fn schedule_is_keyed_by_decode_step() {
        let table = EmbeddingTable::new(3, 2, vec![0.0; 6]).unwrap();
        let forced = vec![
            forced_logits(&ProbDist::one_hot(3, TokenId(2)).unwrap()),
            forced_logits(&ProbDist::new(vec![0.5, 0.5, 0.0]).unwrap()),
        ];
        let m = ScriptedModel::table_driven(table, 16)
            .unwrap()
            .with_schedule(2, forced)
            .unwrap();
        let s = m.init_state(&[TokenId(0), TokenId(1)]).unwrap();
        let first = &s.last_output().unwrap().logits;
        assert_eq!(first.argmax(), TokenId(2));
        let mut s = s;
        let second = m.step(&mut s, &EmbeddingVector::zeros(2)).unwrap().logits;
        assert_eq!(second.values()[0], second.values()[1]);
        assert_eq!(second.values()[2], FORBIDDEN_LOGIT);
        // past the schedule the zero map gives flat logits
        let third = m.step(&mut s, &EmbeddingVector::zeros(2)).unwrap().logits;
        assert!(third.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lens_has_one_layer() {
        let m = ScriptedModel::random_linear(4, 2, 8, 3).unwrap();
        assert!(m.logit_lens(&[0.1, 0.2], 0).is_ok());
        assert!(matches!(m.logit_lens(&[0.1, 0.2], 1), Err(Error::InvalidParameter(_))));
        assert!(matches!(m.logit_lens(&[0.1], 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bad_shapes_rejected() {
        let t = EmbeddingTable::new(2, 2, vec![0.0; 4]).unwrap();
        assert!(ScriptedModel::linear(t.clone(), vec![0.0; 3], vec![0.0; 2], 4).is_err());
        assert!(ScriptedModel::linear(t.clone(), vec![0.0; 4], vec![0.0; 1], 4).is_err());
        let bad = vec![Logits::new(vec![0.0; 5]).unwrap()];
        assert!(ScriptedModel::table_driven(t, 4).unwrap().with_schedule(0, bad).is_err());
    }
}
