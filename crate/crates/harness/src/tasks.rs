//! Synthetic task suites for the scripted model.
//!
//! Every task carries a forced next-token distribution for each decode step,
//! so a scripted model replays it exactly. Output layout is
//! `reasoning..., SEP, answer..., EOS`, with digits occupying ids `0..modulus`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, ensure, Context, Result};
use gated_latent_core::dist::{EmbeddingTable, ProbDist, TokenId};
use gated_latent_core::model::{forced_logits, ScriptedModel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_VOCAB: usize = 128;
pub const DEFAULT_MODULUS: u32 = 10;
pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_BRANCH_WIDTH: usize = 2;
const CONTEXT_LEN: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    ModularChain,
    ForcedBranch,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::ModularChain => "modular_chain",
            TaskKind::ForcedBranch => "forced_branch",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "modular_chain" => Ok(TaskKind::ModularChain),
            "forced_branch" => Ok(TaskKind::ForcedBranch),
            other => bail!("invalid parameter: unknown task kind `{other}` (expected copy, modular_chain or forced_branch)"),
        }
    }
}

/// Sparse forced distribution for one decode step.
pub type ForcedStep = Vec<(TokenId, f64)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTask {
    pub id: String,
    pub prompt: Vec<TokenId>,
    /// Forced distribution per decode step, indexed by step.
    pub forced: Vec<ForcedStep>,
    pub gold: Vec<TokenId>,
    /// Decode step forced to a uniform branch, for `forced_branch` tasks.
    pub branch_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub kind: TaskKind,
    pub seed: u64,
    pub vocab_size: usize,
    pub modulus: u32,
    pub eos: TokenId,
    pub separator: TokenId,
    pub embed_dim: usize,
    pub branch_width: usize,
    pub tasks: Vec<ScriptedTask>,
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteLayout {
    pub vocab_size: usize,
    pub modulus: u32,
    pub embed_dim: usize,
    pub branch_width: usize,
}

impl Default for SuiteLayout {
    fn default() -> Self {
        SuiteLayout {
            vocab_size: DEFAULT_VOCAB,
            modulus: DEFAULT_MODULUS,
            embed_dim: DEFAULT_EMBED_DIM,
            branch_width: DEFAULT_BRANCH_WIDTH,
        }
    }
}

impl SuiteLayout {
    fn eos(&self) -> TokenId {
        TokenId(self.vocab_size as u32 - 1)
    }

    fn separator(&self) -> TokenId {
        TokenId(self.vocab_size as u32 - 2)
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.modulus >= 3, "invalid parameter: modulus must be at least 3");
        ensure!(
            self.vocab_size >= self.modulus as usize + 2,
            "invalid parameter: vocabulary of {} cannot hold {} digits plus separator and EOS",
            self.vocab_size,
            self.modulus
        );
        ensure!(
            (2..=self.modulus as usize).contains(&self.branch_width),
            "invalid parameter: branch_width must lie in 2..={}",
            self.modulus
        );
        ensure!(self.embed_dim >= 1, "invalid parameter: embed_dim must be positive");
        Ok(())
    }
}

fn one_hot(t: TokenId) -> ForcedStep {
    vec![(t, 1.0)]
}

fn digit(d: u32) -> TokenId {
    TokenId(d)
}

/// A copy task: echo `payload` after the separator.
pub fn copy_task(id: String, payload: &[u32], layout: &SuiteLayout) -> ScriptedTask {
    let gold: Vec<TokenId> = payload.iter().map(|&d| digit(d)).collect();
    let mut forced = vec![one_hot(layout.separator())];
    forced.extend(gold.iter().map(|&t| one_hot(t)));
    forced.push(one_hot(layout.eos()));
    ScriptedTask {
        id,
        prompt: gold.clone(),
        forced,
        gold,
        branch_step: None,
    }
}

/// Iterated addition mod `modulus`: the reasoning emits each running sum
/// after the first addition, the answer is the final sum.
pub fn modular_chain_task(id: String, inputs: &[u32], layout: &SuiteLayout) -> ScriptedTask {
    let m = layout.modulus;
    let mut forced = Vec::new();
    let mut acc = inputs[0] % m;
    for &x in &inputs[1..] {
        acc = (acc + x) % m;
        forced.push(one_hot(digit(acc)));
    }
    let gold = vec![digit(acc)];
    forced.push(one_hot(layout.separator()));
    forced.push(one_hot(gold[0]));
    forced.push(one_hot(layout.eos()));
    ScriptedTask {
        id,
        prompt: inputs.iter().map(|&d| digit(d)).collect(),
        forced,
        gold,
        branch_step: None,
    }
}

/// Replaces step `at` of a one-hot task with `(1-eta)` on the intended token
/// and `eta` spread over two distractor digits.
fn add_hesitation(task: &mut ScriptedTask, at: usize, eta: f64, rng: &mut ChaCha8Rng, m: u32) {
    let intended = task.forced[at][0].0;
    let mut distractors: Vec<u32> = (0..m).filter(|&d| digit(d) != intended).collect();
    distractors.shuffle(rng);
    task.forced[at] = vec![
        (intended, 1.0 - eta),
        (digit(distractors[0]), eta / 2.0),
        (digit(distractors[1]), eta / 2.0),
    ];
}

fn random_digits(rng: &mut ChaCha8Rng, len: usize, m: u32) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..m)).collect()
}

/// Deterministic suite of `count` tasks of `kind`.
pub fn gen_tasks(kind: TaskKind, count: usize, seed: u64, layout: SuiteLayout) -> Result<TaskSuite> {
    ensure!(count >= 1, "invalid parameter: count must be at least 1");
    layout.validate()?;
    let m = layout.modulus;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{kind}-{i:04}");
        let task = match kind {
            TaskKind::Copy | TaskKind::ModularChain => {
                let len = rng.random_range(2..=5);
                let xs = random_digits(&mut rng, len, m);
                let mut t = if kind == TaskKind::Copy {
                    copy_task(id, &xs, &layout)
                } else {
                    modular_chain_task(id, &xs, &layout)
                };
                // everything but the final EOS may hesitate
                for at in 0..t.forced.len() - 1 {
                    if t.forced[at][0].0 != layout.separator() && rng.random_bool(0.25) {
                        let eta = rng.random_range(0.1..0.5);
                        add_hesitation(&mut t, at, eta, &mut rng, m);
                    }
                }
                t
            }
            TaskKind::ForcedBranch => {
                let prompt = random_digits(&mut rng, 3, m);
                let len = rng.random_range(2..=4);
                let reasoning = random_digits(&mut rng, len, m);
                let answer = random_digits(&mut rng, 1, m);
                let branch_step = rng.random_range(0..reasoning.len());
                let mut forced: Vec<ForcedStep> = reasoning.iter().map(|&d| one_hot(digit(d))).collect();
                let mut choices: Vec<u32> = (0..m).collect();
                choices.shuffle(&mut rng);
                let p = 1.0 / layout.branch_width as f64;
                forced[branch_step] = choices[..layout.branch_width].iter().map(|&d| (digit(d), p)).collect();
                forced.push(one_hot(layout.separator()));
                forced.extend(answer.iter().map(|&d| one_hot(digit(d))));
                forced.push(one_hot(layout.eos()));
                ScriptedTask {
                    id,
                    prompt: prompt.into_iter().map(digit).collect(),
                    forced,
                    gold: answer.into_iter().map(digit).collect(),
                    branch_step: Some(branch_step),
                }
            }
        };
        tasks.push(task);
    }
    Ok(TaskSuite {
        kind,
        seed,
        vocab_size: layout.vocab_size,
        modulus: m,
        eos: layout.eos(),
        separator: layout.separator(),
        embed_dim: layout.embed_dim,
        branch_width: layout.branch_width,
        tasks,
    })
}

impl TaskSuite {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading task suite {}", path.display()))?;
        let suite: TaskSuite =
            serde_json::from_str(&text).with_context(|| format!("parsing task suite {}", path.display()))?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing task suite {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.tasks.is_empty(), "task suite has no tasks");
        for t in &self.tasks {
            ensure!(!t.prompt.is_empty(), "task {} has an empty prompt", t.id);
            ensure!(!t.gold.is_empty(), "task {} has an empty gold answer", t.id);
            for (s, step) in t.forced.iter().enumerate() {
                self.dense(step)
                    .with_context(|| format!("task {} step {s}", t.id))?;
            }
        }
        Ok(())
    }

    fn dense(&self, step: &ForcedStep) -> Result<ProbDist> {
        let mut probs = vec![0.0; self.vocab_size];
        for &(t, p) in step {
            ensure!(t.index() < self.vocab_size, "token {t} outside vocabulary");
            probs[t.index()] += p;
        }
        Ok(ProbDist::new(probs)?)
    }

    /// Token embeddings shared by every task of the suite.
    pub fn embeddings(&self) -> Result<EmbeddingTable> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_e3b0);
        let data = (0..self.vocab_size * self.embed_dim)
            .map(|_| rng.random_range(-1.0..1.0) as f32 as f64)
            .collect();
        Ok(EmbeddingTable::new(self.vocab_size, self.embed_dim, data)?)
    }

    /// Scripted model replaying `task`'s forced distributions.
    pub fn model_for(&self, table: &EmbeddingTable, task: &ScriptedTask) -> Result<ScriptedModel> {
        let schedule = task
            .forced
            .iter()
            .map(|s| self.dense(s).map(|d| forced_logits(&d)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ScriptedModel::table_driven(table.clone(), CONTEXT_LEN)?.with_schedule(task.prompt.len(), schedule)?)
    }

    /// Expected exploratory fraction when the gate fires exactly on the
    /// forced branch steps and every run follows its forced script.
    pub fn forced_branch_fraction(&self) -> f64 {
        let branches = self.tasks.iter().filter(|t| t.branch_step.is_some()).count();
        let steps: usize = self.tasks.iter().map(|t| t.forced.len()).sum();
        branches as f64 / steps as f64
    }
}
