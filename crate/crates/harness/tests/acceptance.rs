//! Acceptance criteria 1–9. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line, and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use gated_latent_core::analysis::{
    activation_frequency, aggregate, detect_branching_steps, overlap_profile, step_overlap, tpca,
    LensSnapshot, OverlapConfig, StepOverlap,
};
use gated_latent_core::decode::trace::trace_to_string;
use gated_latent_core::decode::{decode, DecodeConfig, InputMode, Method, SamplerConfig};
use gated_latent_core::dist::{EmbeddingVector, TokenId, TopKCandidates};
use gated_latent_core::error::Error;
use gated_latent_core::latent::{contrastive_regularize, soft_embedding, RegularizationConfig};
use gated_latent_core::model::{LanguageModel, ModelState, ScriptedModel, ToyTransformer, ToyTransformerConfig};
use gated_latent_harness::config::{ExperimentConfig, MethodSpec, SweepConfig};
use gated_latent_harness::experiment::{cells, list_files, run_cell, run_experiment, LoadedModel, MANIFEST_FILE};
use gated_latent_harness::tasks::{gen_tasks, SuiteLayout, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: &str = "tests/golden/toy_seed42_tau0.5_k3.jsonl";

fn toy() -> ToyTransformer {
    ToyTransformer::new(ToyTransformerConfig::default()).unwrap()
}

fn toy_prompt(i: u32) -> Vec<TokenId> {
    let len = 1 + (i % 6);
    (0..len).map(|j| TokenId((i * 31 + j * 7 + 3) % 126)).collect()
}

/// 1. Reduction ladder on 50 toy-transformer prompts.
fn reduction_ladder() -> Result<()> {
    let m = toy();
    for i in 0..50u32 {
        let prompt = toy_prompt(i);
        let base = DecodeConfig { max_steps: 24, seed: 1000 + i as u64, ..Default::default() };

        let gated = decode(&m, &prompt, &DecodeConfig { tau: 1.0, ..base.clone() })?;
        let sampling = decode(&m, &prompt, &DecodeConfig { method: Method::CotSampling, ..base.clone() })?;
        ensure!(gated.tokens == sampling.tokens, "prompt {i}: gated(τ=1) differs from cot_sampling");

        let off = RegularizationConfig { enabled: false, ..Default::default() };
        let latent = decode(&m, &prompt, &DecodeConfig { tau: 0.0, regularization: off, ..base.clone() })?;
        let soft = decode(&m, &prompt, &DecodeConfig { method: Method::SoftThinking, ..base.clone() })?;
        ensure!(latent.inputs.len() == soft.inputs.len(), "prompt {i}: soft-thinking lengths differ");
        for (a, b) in latent.inputs.iter().zip(&soft.inputs) {
            let d = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            ensure!(d <= 1e-6, "prompt {i}: embedding gap {d}");
        }

        let top1 = SamplerConfig { top_k: 1, ..Default::default() };
        let s1 = decode(&m, &prompt, &DecodeConfig { method: Method::CotSampling, sampler: top1, ..base.clone() })?;
        let greedy = decode(&m, &prompt, &DecodeConfig { method: Method::CotGreedy, ..base })?;
        ensure!(s1.tokens == greedy.tokens, "prompt {i}: top_k=1 sampling differs from greedy");
    }
    Ok(())
}

/// 2. Contrastive closed form over 1000 random draws.
fn contrastive_closed_form() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = RegularizationConfig { epsilon: 1e-6, enabled: true };
    for _ in 0..1000 {
        let d = rng.random_range(1..=64);
        let scale = 10f64.powf(rng.random_range(-7.0..2.0));
        let e: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let star: Vec<f64> = e.iter().map(|x| x + scale * rng.random_range(-1.0..1.0)).collect();
        let h: f64 = rng.random();
        let out = contrastive_regularize(
            &EmbeddingVector::new(e.clone())?,
            &EmbeddingVector::new(star.clone())?,
            h,
            &cfg,
        )?;
        let delta: Vec<f64> = e.iter().zip(&star).map(|(a, b)| a - b).collect();
        let dn = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let gap = out
            .values()
            .iter()
            .zip(e.iter().zip(&star))
            .map(|(o, (x, s))| (o - ((1.0 + h) * x - h * s)).powi(2))
            .sum::<f64>()
            .sqrt();
        let bound = h * dn * 1e-6 / (dn + 1e-6) + 1e-9;
        ensure!(gap <= bound, "closed-form gap {gap} exceeds {bound}");
        let dot: f64 = out.values().iter().zip(&e).zip(&delta).map(|((o, x), dl)| (o - x) * dl).sum();
        ensure!(dot >= 0.0, "repulsion dot {dot} < 0");
    }
    Ok(())
}

/// 3. Gate exactness on forced_branch suites.
fn gate_exactness() -> Result<()> {
    for width in [2usize, 3] {
        let layout = SuiteLayout { branch_width: width, ..Default::default() };
        let suite = gen_tasks(TaskKind::ForcedBranch, 25, 7, layout)?;
        let dir = tempfile::tempdir()?;
        let suite_path = dir.path().join("suite.json");
        suite.save(&suite_path)?;
        let cfg = ExperimentConfig {
            methods: vec![MethodSpec::Base(Method::GatedLatent)],
            ..ExperimentConfig::new(suite_path)
        };
        let model = LoadedModel::load(&cfg.model, &suite)?;
        let branches = suite.tasks.len();
        let total: usize = suite.tasks.iter().map(|t| t.forced.len()).sum();
        for tau in [0.0, 0.3, 0.5, 0.9, 0.99] {
            let cell = gated_latent_harness::experiment::Cell {
                method: MethodSpec::Base(Method::GatedLatent),
                tau,
                gate_k: width,
                seed: 5,
            };
            let ts = run_cell(&cfg, &suite, &model, &cell)?;
            let steps: usize = ts.iter().map(|t| t.steps.len()).sum();
            let latent: usize = ts.iter().map(|t| t.latent_steps()).sum();
            ensure!(steps == total, "width {width} τ={tau}: {steps} steps, constructed {total}");
            ensure!(latent == branches, "width {width} τ={tau}: {latent} latent, constructed {branches}");
            ensure!(
                activation_frequency(&ts)? == branches as f64 / total as f64
                    && suite.forced_branch_fraction() == branches as f64 / total as f64,
                "activation frequency mismatch"
            );
            for (t, task) in ts.iter().zip(&suite.tasks) {
                for s in &t.steps {
                    let h = s.entropy.normalized;
                    if Some(s.step) == task.branch_step {
                        ensure!((h - 1.0).abs() <= 1e-9, "uniform step reads H̄={h}");
                        ensure!(s.mode == InputMode::SoftRegularized, "branch step not latent");
                    } else {
                        ensure!(h == 0.0, "one-hot step reads H̄={h}");
                    }
                }
                ensure!(t.answer == task.gold, "task {} answer differs from gold", task.id);
            }
        }
    }
    Ok(())
}

/// 4. Linearity oracle on the scripted linear model.
fn linearity_oracle() -> Result<()> {
    let v = 48;
    let m = ScriptedModel::random_linear(v, 12, 16, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let k = rng.random_range(1..=8);
        let mut ids: Vec<u32> = (0..v as u32).collect();
        for i in 0..k {
            let j = rng.random_range(i..v);
            ids.swap(i, j);
        }
        let mut w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        w.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|x| x / total).collect();
        let tokens: Vec<TokenId> = ids[..k].iter().map(|&i| TokenId(i)).collect();
        let cands = TopKCandidates::new(tokens.clone(), probs.clone())?;

        let mut s = m.empty_state();
        let got = m.step(&mut s, &soft_embedding(&cands, m.embeddings())?)?.logits;

        let mut expected = vec![0.0; v];
        for (t, p) in tokens.iter().zip(&probs) {
            let mut s = m.empty_state();
            let l = m.step(&mut s, &m.embeddings().embedding(*t)?)?.logits;
            for (x, y) in expected.iter_mut().zip(l.values()) {
                *x += p * y;
            }
        }
        let gap = got.values().iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(gap <= 1e-6, "mixture logits off by {gap}");
    }
    Ok(())
}

/// 5. Final-layer lens consistency and one-hot overlap.
fn lens_consistency() -> Result<()> {
    let m = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut state = m.init_state(&[TokenId(9)])?;
    let last = m.num_layers() - 1;
    for _ in 0..100 {
        let input = if rng.random_bool(0.5) {
            m.embeddings().embedding(TokenId(rng.random_range(0..128)))?
        } else {
            EmbeddingVector::new((0..64).map(|_| rng.random_range(-1.5..1.5)).collect())?
        };
        if state.position() + 1 >= m.context_len() {
            state = m.init_state(&[TokenId(9)])?;
        }
        let out = m.step(&mut state, &input)?;
        let lens = m.logit_lens(out.activations.layer(last).unwrap(), last)?;
        ensure!(lens.argmax() == out.logits.argmax(), "final-layer lens top-1 differs");
    }

    let ts: Vec<_> = (0..8u32)
        .map(|i| decode(&m, &toy_prompt(i), &DecodeConfig { max_steps: 24, seed: i as u64, ..Default::default() }))
        .collect::<Result<_, _>>()?;
    let steps = detect_branching_steps(&ts, 0.5, 2.0, 200, 0)?;
    ensure!(!steps.is_empty(), "no branching steps found");
    let cfg = OverlapConfig { mixture_k: Some(1), ..Default::default() };
    let (raw, reg) = overlap_profile(&m, &ts, &steps, &cfg)?;
    for p in [&raw, &reg] {
        ensure!(p.layers.len() == m.num_layers(), "profile layer count");
        for (l, layer) in p.layers.iter().enumerate() {
            ensure!(layer.o_top1_mean == 1.0, "layer {l}: O_top1 = {}", layer.o_top1_mean);
        }
    }
    Ok(())
}

/// 6. Two-step, three-layer overlap instance: hand values plus brute force.
fn overlap_oracle() -> Result<()> {
    let set = |ids: [u32; 4]| ids.iter().map(|&i| TokenId(i)).collect::<Vec<_>>();
    let refs = |ids: [u32; 4]| LensSnapshot::new(4, vec![set(ids); 3]);
    let top1 = refs([0, 1, 2, 3])?;
    let top2 = refs([4, 5, 6, 7])?;
    let soft_a = LensSnapshot::new(4, vec![set([0, 1, 2, 3]), set([0, 1, 4, 5]), set([0, 4, 5, 6])])?;
    let soft_b = LensSnapshot::new(4, vec![set([0, 1, 4, 8]), set([2, 3, 7, 9]), set([0, 1, 2, 3])])?;
    let steps = vec![step_overlap(&top1, &top2, &soft_a)?, step_overlap(&top1, &top2, &soft_b)?];
    let p = aggregate(&steps)?;

    // hand values: step a (1, .5, .25 | 0, .5, .75), step b (.5, .5, 1 | .25, .25, 0)
    let hand_top1 = [(0.75, 0.25), (0.5, 0.0), (0.625, 0.375)];
    let hand_top2 = [(0.125, 0.125), (0.375, 0.125), (0.375, 0.375)];
    let brute = |f: &dyn Fn(&StepOverlap) -> f64| {
        let xs: Vec<f64> = steps.iter().map(f).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (mean, sd / n.sqrt())
    };
    ensure!(p.n == 2 && p.layers.len() == 3, "profile shape");
    for l in 0..3 {
        let got = p.layers[l];
        let b1 = brute(&|s: &StepOverlap| s.o_top1[l]);
        let b2 = brute(&|s: &StepOverlap| s.o_top2[l]);
        for (g, h, b) in [
            (got.o_top1_mean, hand_top1[l].0, b1.0),
            (got.o_top1_se, hand_top1[l].1, b1.1),
            (got.o_top2_mean, hand_top2[l].0, b2.0),
            (got.o_top2_se, hand_top2[l].1, b2.1),
        ] {
            ensure!((g - h).abs() <= 1e-12 && (g - b).abs() <= 1e-12, "layer {l}: {g} vs hand {h}, brute {b}");
        }
    }
    Ok(())
}

/// 7. TPCA table.
fn tpca_table() -> Result<()> {
    ensure!((tpca(0.6, 100.0, 200.0)? - 233.33).abs() <= 0.01, "α=0.6 case");
    for t_c in [0.0, 17.0, 250.5] {
        ensure!(tpca(1.0, t_c, 999.0)? == t_c, "α=1 must give T_c");
    }
    ensure!(matches!(tpca(0.0, 100.0, 200.0), Err(Error::UndefinedMetric(_))), "α=0 must be undefined");
    Ok(())
}

/// 8. Default-shaped sweep: row count and byte replay from the manifest.
fn sweep_mechanics() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let suite_path = dir.path().join("suite.json");
    gen_tasks(TaskKind::ModularChain, 12, 3, SuiteLayout::default())?.save(&suite_path)?;
    let cfg = ExperimentConfig {
        seeds: vec![0, 1, 2],
        methods: vec![MethodSpec::Base(Method::GatedLatent), MethodSpec::Base(Method::CotSampling)],
        sweep: SweepConfig::default(),
        ..ExperimentConfig::new(suite_path)
    };
    let predicted = 2 * (5 + 3 - 1) * 3;
    ensure!(cells(&cfg).len() == predicted, "cell count {} != {predicted}", cells(&cfg).len());

    let first = dir.path().join("run1");
    let rows = run_experiment(&cfg, &first, 4)?;
    ensure!(rows.len() == predicted, "{} rows, predicted {predicted}", rows.len());

    let replay_cfg = ExperimentConfig::parse(&std::fs::read_to_string(first.join(MANIFEST_FILE))?)?;
    let second = dir.path().join("run2");
    run_experiment(&replay_cfg, &second, 1)?;
    let a = list_files(&first)?;
    ensure!(a == list_files(&second)?, "replay produced a different file set");
    ensure!(a.len() == 2 + predicted * (1 + 12), "unexpected file count {}", a.len());
    for rel in &a {
        ensure!(
            std::fs::read(first.join(rel))? == std::fs::read(second.join(rel))?,
            "{} differs on replay",
            rel.display()
        );
    }

    let grid = ExperimentConfig::parse(
        "task_suite = \"s\"\nmethods = [\"selar\", \"cot_greedy\"]\n[sweep]\nmode = \"grid\"\ntau = [0.3, 0.5, 0.7]\ngate_k = [3, 5, 7]\n",
    )?;
    ensure!(cells(&grid).len() == 18, "grid example gives {} cells", cells(&grid).len());
    Ok(())
}

/// 9. Golden trace reproduced byte for byte.
fn golden_trace() -> Result<()> {
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN))?;
    let cfg = DecodeConfig { tau: 0.5, gate_k: 3, max_steps: 32, seed: 42, ..Default::default() };
    let t = decode(&toy(), &[TokenId(1), TokenId(2), TokenId(3)], &cfg)?;
    ensure!(t.steps.len() == 32, "golden run has {} steps", t.steps.len());
    let text = trace_to_string(&t);
    if text != golden {
        let line = text.lines().zip(golden.lines()).position(|(a, b)| a != b);
        anyhow::bail!("trace differs from golden file (first differing line: {line:?})");
    }
    Ok(())
}

type Criterion = (&'static str, fn() -> Result<()>, Option<Duration>);

fn main() {
    let criteria: [Criterion; 9] = [
        ("reduction ladder", reduction_ladder, Some(Duration::from_secs(10))),
        ("contrastive closed form", contrastive_closed_form, Some(Duration::from_secs(1))),
        ("entropy gate exactness", gate_exactness, None),
        ("linearity oracle", linearity_oracle, None),
        ("logit-lens consistency", lens_consistency, None),
        ("overlap protocol oracle", overlap_oracle, None),
        ("tpca", tpca_table, Some(Duration::from_secs(1))),
        ("sensitivity-sweep mechanics", sweep_mechanics, Some(Duration::from_secs(60))),
        ("trace-format stability", golden_trace, None),
    ];
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run));
        let elapsed = start.elapsed();
        let verdict = match outcome {
            Ok(Ok(())) => match limit {
                Some(l) if elapsed > *l => Err(format!("took {elapsed:?}, limit {l:?}")),
                _ => Ok(()),
            },
            Ok(Err(e)) => Err(format!("{e:#}")),
            Err(_) => Err("panicked".to_string()),
        };
        match verdict {
            Ok(()) => println!("criterion {}: {name} ... PASS ({:.1} ms)", i + 1, elapsed.as_secs_f64() * 1e3),
            Err(why) => {
                failed += 1;
                println!("criterion {}: {name} ... FAIL ({:.1} ms): {why}", i + 1, elapsed.as_secs_f64() * 1e3);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
