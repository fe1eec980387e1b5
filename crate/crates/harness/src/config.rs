//! Experiment configuration (TOML).
//!
//! ```toml
//! task_suite = "suite.json"
//! seeds = [0, 1, 2]
//! methods = ["selar", "cot_sampling"]
//!
//! [model]
//! kind = "scripted"
//!
//! [decode]
//! max_steps = 64
//!
//! [sweep]
//! mode = "axes"
//! tau = [0.3, 0.4, 0.5, 0.6, 0.7]
//! gate_k = [3, 5, 7]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use gated_latent_core::analysis::DEFAULT_HISTOGRAM_BINS;
use gated_latent_core::decode::{DecodeConfig, Method};
use gated_latent_core::model::ToyTransformerConfig;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A decoding method plus ablation switches, named as in report rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MethodSpec {
    Base(Method),
    /// Gated method with the gate removed: latent input at every step.
    NoGate,
    /// Gated method without contrastive regularization.
    NoReg,
}

impl MethodSpec {
    pub fn name(self) -> &'static str {
        match self {
            MethodSpec::Base(m) => m.as_str(),
            MethodSpec::NoGate => "selar_no_gate",
            MethodSpec::NoReg => "selar_no_reg",
        }
    }

    /// `base` with this method's switches applied.
    pub fn apply(self, base: &DecodeConfig) -> DecodeConfig {
        let mut cfg = base.clone();
        match self {
            MethodSpec::Base(m) => cfg.method = m,
            MethodSpec::NoGate => {
                cfg.method = Method::GatedLatent;
                cfg.gating_enabled = false;
            }
            MethodSpec::NoReg => {
                cfg.method = Method::GatedLatent;
                cfg.regularization.enabled = false;
            }
        }
        cfg
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selar_no_gate" => Ok(MethodSpec::NoGate),
            "selar_no_reg" => Ok(MethodSpec::NoReg),
            other => match other.parse::<Method>() {
                Ok(m) => Ok(MethodSpec::Base(m)),
                Err(_) => bail!(
                    "unknown method `{other}` (expected selar, cot_greedy, cot_sampling, soft_thinking, selar_no_gate or selar_no_reg)"
                ),
            },
        }
    }
}

impl Serialize for MethodSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MethodSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Seeded toy transformer built in memory.
    Toy {
        #[serde(default)]
        toy: ToyTransformerConfig,
    },
    /// Toy transformer loaded from a weight manifest.
    Weights { path: PathBuf },
    /// Per-task scripted models replaying the suite's forced tables.
    #[default]
    Scripted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// `tau` at `anchor_gate_k`, then `gate_k` at `anchor_tau`, shared cells once.
    Axes,
    /// Full cartesian product of `tau` and `gate_k`.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub tau: Vec<f64>,
    pub gate_k: Vec<usize>,
    pub anchor_tau: f64,
    pub anchor_gate_k: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            mode: SweepMode::Axes,
            tau: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            gate_k: vec![3, 5, 7],
            anchor_tau: 0.5,
            anchor_gate_k: 3,
        }
    }
}

impl SweepConfig {
    /// (τ, k) cells in run order.
    pub fn cells(&self) -> Vec<(f64, usize)> {
        let mut cells = Vec::new();
        let mut push = |c: (f64, usize)| {
            if !cells.contains(&c) {
                cells.push(c);
            }
        };
        match self.mode {
            SweepMode::Axes => {
                for &t in &self.tau {
                    push((t, self.anchor_gate_k));
                }
                for &k in &self.gate_k {
                    push((self.anchor_tau, k));
                }
            }
            SweepMode::Grid => {
                for &t in &self.tau {
                    for &k in &self.gate_k {
                        push((t, k));
                    }
                }
            }
        }
        cells
    }

    fn validate(&self) -> Result<()> {
        ensure!(!self.tau.is_empty(), "sweep.tau: grid must not be empty");
        ensure!(!self.gate_k.is_empty(), "sweep.gate_k: grid must not be empty");
        for (key, t) in self.tau.iter().map(|t| ("sweep.tau", *t)).chain([("sweep.anchor_tau", self.anchor_tau)]) {
            ensure!((0.0..=1.0).contains(&t), "{key}: {t} is outside [0, 1]");
        }
        for (key, k) in self
            .gate_k
            .iter()
            .map(|k| ("sweep.gate_k", *k))
            .chain([("sweep.anchor_gate_k", self.anchor_gate_k)])
        {
            ensure!(k >= 2, "{key}: {k} is below 2");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task_suite: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Not part of the replay manifest; `--out` overrides it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_methods() -> Vec<MethodSpec> {
    vec![MethodSpec::Base(Method::GatedLatent), MethodSpec::Base(Method::CotSampling)]
}

fn default_bins() -> usize {
    DEFAULT_HISTOGRAM_BINS
}

impl ExperimentConfig {
    pub fn new(task_suite: PathBuf) -> Self {
        ExperimentConfig {
            task_suite,
            seeds: default_seeds(),
            methods: default_methods(),
            histogram_bins: default_bins(),
            output_dir: None,
            model: ModelSpec::default(),
            decode: DecodeConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// Parses a config file. Relative paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.task_suite = base.join(&cfg.task_suite);
        if let ModelSpec::Weights { path } = &mut cfg.model {
            *path = base.join(&*path);
        }
        if let Some(out) = &mut cfg.output_dir {
            *out = base.join(&*out);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("malformed config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.seeds.is_empty(), "seeds: list must not be empty");
        ensure!(!self.methods.is_empty(), "methods: list must not be empty");
        ensure!(self.histogram_bins >= 2, "histogram_bins: must be at least 2");
        ensure!(self.decode.max_steps >= 1, "decode.max_steps: must be at least 1");
        self.decode.sampler.validate().context("decode.sampler")?;
        self.decode.regularization.validate().context("decode.regularization")?;
        self.sweep.validate()?;
        Ok(())
    }

    /// Replay manifest: the resolved config without `output_dir`, with the
    /// suite and weight paths made absolute.
    pub fn manifest(&self) -> Result<String> {
        let mut m = self.clone();
        m.output_dir = None;
        m.task_suite = std::path::absolute(&m.task_suite).context("task_suite: cannot resolve path")?;
        if let ModelSpec::Weights { path } = &mut m.model {
            *path = std::path::absolute(&*path).context("model.path: cannot resolve path")?;
        }
        Ok(toml::to_string(&m)?)
    }

    pub fn row_count(&self) -> usize {
        self.methods.len() * self.sweep.cells().len() * self.seeds.len()
    }
}
