//! A small pre-norm decoder-only transformer with seeded weights.
//!
//! Weights are drawn as `f32` from a ChaCha stream and widened to `f64` for
//! compute, so a save/load round trip is lossless. Transcendentals go through
//! `libm` to keep logits bit-identical across platforms.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::weights::{self, NamedTensor, WeightFile};
use super::{check_step, LanguageModel, LayerActivations, ModelState, StepOutput};
use crate::dist::{EmbeddingTable, EmbeddingVector, Logits};
use crate::error::{Error, FormatError, Result};

const LN_EPS: f64 = 1e-5;
const FFN_MULT: usize = 4;
/// Standard deviation the unembedding aims for on a unit-variance input.
const LOGIT_SCALE: f32 = 8.0;
const HEADER_TAG: &str = "toy_transformer";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ToyTransformerConfig {
    fn default() -> Self {
        ToyTransformerConfig {
            layers: 6,
            d_model: 64,
            heads: 4,
            vocab_size: 128,
            context_len: 256,
            seed: 42,
        }
    }
}

impl ToyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidParameter(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidParameter(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    fn header(&self) -> String {
        format!(
            "{HEADER_TAG} layers={} d_model={} heads={} vocab_size={} context_len={} seed={}",
            self.layers, self.d_model, self.heads, self.vocab_size, self.context_len, self.seed
        )
    }

    fn parse_header(lines: &[String]) -> Result<Self> {
        let line = lines
            .iter()
            .find(|l| l.starts_with(HEADER_TAG))
            .ok_or_else(|| FormatError::MalformedLine {
                line: 0,
                reason: format!("missing `# {HEADER_TAG} ...` header"),
            })?;
        let mut cfg = ToyTransformerConfig::default();
        for kv in line.split_whitespace().skip(1) {
            let (key, value) = kv.split_once('=').ok_or_else(|| FormatError::MalformedLine {
                line: 0,
                reason: format!("header field `{kv}` is not key=value"),
            })?;
            let parsed: u64 = value.parse().map_err(|_| FormatError::MalformedLine {
                line: 0,
                reason: format!("header field `{key}` is not an integer"),
            })?;
            match key {
                "layers" => cfg.layers = parsed as usize,
                "d_model" => cfg.d_model = parsed as usize,
                "heads" => cfg.heads = parsed as usize,
                "vocab_size" => cfg.vocab_size = parsed as usize,
                "context_len" => cfg.context_len = parsed as usize,
                "seed" => cfg.seed = parsed,
                other => {
                    return Err(FormatError::MalformedLine {
                        line: 0,
                        reason: format!("unknown header field `{other}`"),
                    }
                    .into())
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_w: Vec<f64>,
    ln1_b: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ln2_w: Vec<f64>,
    ln2_b: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ToyTransformer {
    cfg: ToyTransformerConfig,
    tok_emb: EmbeddingTable,
    pos_emb: Vec<f64>,
    blocks: Vec<Block>,
    lnf_w: Vec<f64>,
    lnf_b: Vec<f64>,
    /// `[vocab, d]`, row per token.
    unembed: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ToyState {
    position: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    last: Option<StepOutput>,
}

impl ModelState for ToyState {
    fn position(&self) -> usize {
        self.position
    }

    fn last_output(&self) -> Option<&StepOutput> {
        self.last.as_ref()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, n: usize, bound: f32) -> Vec<f64> {
        (0..n)
            .map(|_| ((self.rng.random::<f32>() * 2.0 - 1.0) * bound) as f64)
            .collect()
    }
}

fn constant(n: usize, v: f64) -> Vec<f64> {
    vec![v; n]
}

impl ToyTransformer {
    /// Deterministic seeded initialization.
    pub fn new(cfg: ToyTransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let f = FFN_MULT * d;
        let sqrt3 = 3f32.sqrt();
        let inv = |fan_in: usize| sqrt3 / (fan_in as f32).sqrt();
        let residual = 1.0 / (2.0 * cfg.layers as f32).sqrt();

        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let tok = init.uniform(v * d, sqrt3);
        let pos_emb = init.uniform(cfg.context_len * d, 0.2);
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1_w: constant(d, 1.0),
                ln1_b: constant(d, 0.0),
                wq: init.uniform(d * d, inv(d)),
                wk: init.uniform(d * d, inv(d)),
                wv: init.uniform(d * d, inv(d)),
                wo: init.uniform(d * d, inv(d) * residual),
                ln2_w: constant(d, 1.0),
                ln2_b: constant(d, 0.0),
                w1: init.uniform(d * f, inv(d)),
                b1: init.uniform(f, 0.1),
                w2: init.uniform(f * d, inv(f) * residual),
                b2: constant(d, 0.0),
            })
            .collect();
        let unembed = init.uniform(v * d, inv(d) * LOGIT_SCALE);
        Ok(ToyTransformer {
            tok_emb: EmbeddingTable::new(v, d, tok)?,
            pos_emb,
            blocks,
            lnf_w: constant(d, 1.0),
            lnf_b: constant(d, 0.0),
            unembed,
            cfg,
        })
    }

    pub fn config(&self) -> &ToyTransformerConfig {
        &self.cfg
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let d = self.cfg.d_model;
        let f = FFN_MULT * d;
        let v = self.cfg.vocab_size;
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d], self.tok_emb.as_flat()),
            ("pos_emb".to_string(), vec![self.cfg.context_len, d], &self.pos_emb[..]),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.push((p("ln1.weight"), vec![d], &b.ln1_w));
            out.push((p("ln1.bias"), vec![d], &b.ln1_b));
            out.push((p("attn.wq"), vec![d, d], &b.wq));
            out.push((p("attn.wk"), vec![d, d], &b.wk));
            out.push((p("attn.wv"), vec![d, d], &b.wv));
            out.push((p("attn.wo"), vec![d, d], &b.wo));
            out.push((p("ln2.weight"), vec![d], &b.ln2_w));
            out.push((p("ln2.bias"), vec![d], &b.ln2_b));
            out.push((p("mlp.w1"), vec![d, f], &b.w1));
            out.push((p("mlp.b1"), vec![f], &b.b1));
            out.push((p("mlp.w2"), vec![f, d], &b.w2));
            out.push((p("mlp.b2"), vec![d], &b.b2));
        }
        out.push(("ln_f.weight".into(), vec![d], &self.lnf_w));
        out.push(("ln_f.bias".into(), vec![d], &self.lnf_b));
        out.push(("unembed".into(), vec![v, d], &self.unembed));
        out
    }

    pub fn to_weight_file(&self) -> WeightFile {
        WeightFile {
            header: vec![self.cfg.header()],
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, shape, data)| NamedTensor {
                    name,
                    shape,
                    data: data.iter().map(|x| *x as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        let cfg = ToyTransformerConfig::parse_header(&file.header)?;
        // Build a template for names and shapes, then overwrite every tensor.
        let template = ToyTransformer::new(ToyTransformerConfig { seed: 0, ..cfg.clone() })?;
        let mut loaded: Vec<Vec<f64>> = Vec::new();
        for (name, shape, _) in template.tensors() {
            let t = file
                .get(&name)
                .ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
            let expected: usize = shape.iter().product();
            if t.shape != shape {
                return Err(FormatError::ShapeMismatch {
                    name,
                    expected,
                    found: t.numel(),
                }
                .into());
            }
            loaded.push(t.data.iter().map(|x| *x as f64).collect());
        }
        let mut it = loaded.into_iter();
        let mut next = || it.next().expect("tensor count matches template");
        let d = cfg.d_model;
        let tok_emb = EmbeddingTable::new(cfg.vocab_size, d, next())?;
        let pos_emb = next();
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                ln1_w: next(),
                ln1_b: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln2_w: next(),
                ln2_b: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let lnf_w = next();
        let lnf_b = next();
        let unembed = next();
        Ok(ToyTransformer {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            lnf_w,
            lnf_b,
            unembed,
        })
    }

    pub fn save_weights(&self, manifest_path: &Path) -> Result<()> {
        weights::save(&self.to_weight_file(), manifest_path)
    }

    pub fn load_weights(manifest_path: &Path) -> Result<Self> {
        Self::from_weight_file(&weights::load(manifest_path)?)
    }

    fn unembed_normalized(&self, hidden: &[f64]) -> Result<Logits> {
        let h = layer_norm(hidden, &self.lnf_w, &self.lnf_b);
        let d = self.cfg.d_model;
        let logits = self
            .unembed
            .chunks_exact(d)
            .map(|row| dot(row, &h))
            .collect();
        Logits::new(logits)
    }

    fn attention(&self, layer: usize, q: &[f64], state: &ToyState) -> Vec<f64> {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let keys = &state.keys[layer];
        let values = &state.values[layer];
        let n = keys.len() / d;
        let mut out = vec![0.0; d];
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let qh = &q[h * hd..(h + 1) * hd];
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                *s = dot(qh, kh) * scale;
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = libm::exp(*s - max);
                total += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let w = s / total;
                let vh = &values[j * d + h * hd..j * d + (h + 1) * hd];
                for (o, v) in out[h * hd..(h + 1) * hd].iter_mut().zip(vh) {
                    *o += w * v;
                }
            }
        }
        out
    }
}

impl LanguageModel for ToyTransformer {
    type State = ToyState;

    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn num_layers(&self) -> usize {
        self.cfg.layers
    }

    fn context_len(&self) -> usize {
        self.cfg.context_len
    }

    fn embeddings(&self) -> &EmbeddingTable {
        &self.tok_emb
    }

    fn empty_state(&self) -> ToyState {
        ToyState {
            position: 0,
            keys: vec![Vec::new(); self.cfg.layers],
            values: vec![Vec::new(); self.cfg.layers],
            last: None,
        }
    }

    fn step(&self, state: &mut ToyState, input: &EmbeddingVector) -> Result<StepOutput> {
        let d = self.cfg.d_model;
        check_step(state.position, self.cfg.context_len, input, d)?;
        let pos = &self.pos_emb[state.position * d..(state.position + 1) * d];
        let mut x: Vec<f64> = input.values().iter().zip(pos).map(|(a, b)| a + b).collect();
        let mut hidden = Vec::with_capacity(self.cfg.layers);
        for (l, b) in self.blocks.iter().enumerate() {
            let h = layer_norm(&x, &b.ln1_w, &b.ln1_b);
            let q = matvec(&h, &b.wq, d);
            state.keys[l].extend(matvec(&h, &b.wk, d));
            state.values[l].extend(matvec(&h, &b.wv, d));
            let attn = self.attention(l, &q, state);
            add_assign(&mut x, &matvec(&attn, &b.wo, d));

            let h = layer_norm(&x, &b.ln2_w, &b.ln2_b);
            let mut u = matvec(&h, &b.w1, FFN_MULT * d);
            for (ui, bi) in u.iter_mut().zip(&b.b1) {
                *ui = gelu(*ui + bi);
            }
            let mut m = matvec(&u, &b.w2, d);
            add_assign(&mut m, &b.b2);
            add_assign(&mut x, &m);
            hidden.push(x.clone());
        }
        let logits = self.unembed_normalized(&x)?;
        state.position += 1;
        let out = StepOutput {
            logits,
            activations: LayerActivations::new(hidden)?,
        };
        state.last = Some(out.clone());
        Ok(out)
    }

    fn logit_lens(&self, activation: &[f64], layer: usize) -> Result<Logits> {
        if layer >= self.cfg.layers {
            return Err(Error::InvalidParameter(format!(
                "layer {layer} out of range for {} layers",
                self.cfg.layers
            )));
        }
        if activation.len() != self.cfg.d_model {
            return Err(Error::InvalidInput(format!(
                "activation has dimension {}, model expects {}",
                activation.len(),
                self.cfg.d_model
            )));
        }
        self.unembed_normalized(activation)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x · W` with `W` stored row-major as `[x.len(), out]`.
fn matvec(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (xi, row) in x.iter().zip(w.chunks_exact(out)) {
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

fn add_assign(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn layer_norm(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(w.iter().zip(b))
        .map(|(v, (wi, bi))| (v - mean) * inv * wi + bi)
        .collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + libm::tanh(C * (x + 0.044715 * x * x * x)))
}
