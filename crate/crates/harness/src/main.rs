use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gated_latent_core::analysis::OverlapConfig;
use gated_latent_core::decode::trace::write_trace;
use gated_latent_core::decode::{decode, DecodeConfig, Transcript};
use gated_latent_core::dist::TokenId;
use gated_latent_core::model::{LanguageModel, ToyTransformer, ToyTransformerConfig};
use gated_latent_harness::config::{ExperimentConfig, MethodSpec, ModelSpec};
use gated_latent_harness::experiment::{run_experiment, REPORT_FILE};
use gated_latent_harness::overlap::{analyze, load_traces, write_overlap_csv, OverlapOptions};
use gated_latent_harness::report::sweep_report;
use gated_latent_harness::tasks::{gen_tasks, SuiteLayout, TaskKind, TaskSuite};

#[derive(Parser)]
#[command(name = "gated-latent", version, about = "Entropy-gated latent decoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one prompt and write its JSONL trace.
    Decode(DecodeArgs),
    /// Run a τ × k sweep from a config file.
    Sweep(SweepArgs),
    /// Logit-lens overlap profiles over saved traces.
    AnalyzeOverlap(OverlapArgs),
    /// Generate a synthetic task suite.
    GenTasks(GenTasksArgs),
    /// Consolidate a run directory's report into summary tables.
    Report(ReportArgs),
    /// Write the toy transformer's weights as manifest plus blob.
    ExportWeights(ExportArgs),
}

#[derive(Args)]
struct ModelArg {
    /// `toy`, `scripted`, or a weight manifest path. Defaults to the
    /// config's model, else `toy`.
    #[arg(long)]
    model: Option<String>,
    /// Seed of the built-in toy transformer.
    #[arg(long, default_value_t = 42)]
    model_seed: u64,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArg,
    /// Comma-separated prompt token ids.
    #[arg(long, value_delimiter = ',')]
    prompt: Vec<u32>,
    /// Task suite whose task `--task` supplies prompt, EOS and separator.
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long)]
    task: Option<usize>,
    #[arg(long)]
    method: Option<MethodSpec>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gate_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Trace output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Replace the method list.
    #[arg(long, value_delimiter = ',')]
    method: Vec<MethodSpec>,
    /// Replace the τ grid.
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    /// Replace the k grid.
    #[arg(long, value_delimiter = ',')]
    gate_k: Vec<usize>,
    /// Replace the seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Write the consolidated summary after the sweep, with this baseline
    /// for the overhead table.
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Args)]
struct OverlapArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Directory searched recursively for `.jsonl` traces.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 10)]
    k_lens: usize,
    /// Mixture support of the soft passes; each trace's gate_k when omitted.
    #[arg(long)]
    mixture_k: Option<usize>,
    #[arg(long, default_value_t = 2.0)]
    ratio_bound: f64,
    #[arg(long, default_value_t = 200)]
    max_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenTasksArgs {
    #[arg(long)]
    kind: TaskKind,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of equally likely tokens at the forced branch step.
    #[arg(long, default_value_t = 2)]
    branch_width: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing report.csv.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Manifest path; the blob goes next to it with a `.bin` extension.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Decode(a) => cmd_decode(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::AnalyzeOverlap(a) => cmd_overlap(a),
        Command::GenTasks(a) => cmd_gen_tasks(a),
        Command::Report(a) => cmd_report(a),
        Command::ExportWeights(a) => {
            let cfg = ToyTransformerConfig { seed: a.seed, ..Default::default() };
            ToyTransformer::new(cfg)?.save_weights(&a.out)?;
            eprintln!("wrote {}", a.out.display());
            Ok(())
        }
    }
}

fn resolve_model(arg: &ModelArg, fallback: Option<&ModelSpec>) -> ModelSpec {
    match arg.model.as_deref() {
        Some("toy") => ModelSpec::Toy {
            toy: ToyTransformerConfig { seed: arg.model_seed, ..Default::default() },
        },
        Some("scripted") => ModelSpec::Scripted,
        Some(path) => ModelSpec::Weights { path: path.into() },
        None => fallback.cloned().unwrap_or(ModelSpec::Toy {
            toy: ToyTransformerConfig { seed: arg.model_seed, ..Default::default() },
        }),
    }
}

fn load_toy(spec: &ModelSpec) -> Result<ToyTransformer> {
    match spec {
        ModelSpec::Toy { toy } => Ok(ToyTransformer::new(toy.clone())?),
        ModelSpec::Weights { path } => {
            ToyTransformer::load_weights(path).with_context(|| format!("loading weights {}", path.display()))
        }
        ModelSpec::Scripted => bail!("the scripted model needs a task suite"),
    }
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let exp = a.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let mut cfg = exp.as_ref().map(|e| e.decode.clone()).unwrap_or_default();
    if let Some(m) = a.method {
        cfg = m.apply(&cfg);
    }
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    if let Some(k) = a.gate_k {
        cfg.gate_k = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.max_steps {
        cfg.max_steps = n;
    }
    let spec = resolve_model(&a.model, exp.as_ref().map(|e| &e.model));

    let suite_path = a.suite.clone().or_else(|| exp.as_ref().map(|e| e.task_suite.clone()));
    let transcript = match (suite_path, a.task) {
        (Some(path), Some(i)) => {
            let suite = TaskSuite::load(&path)?;
            let task = suite
                .tasks
                .get(i)
                .with_context(|| format!("task index {i} out of range for {} tasks", suite.tasks.len()))?;
            cfg.eos_token = suite.eos;
            cfg.separator_token = Some(suite.separator);
            match spec {
                ModelSpec::Scripted => {
                    let m = suite.model_for(&suite.embeddings()?, task)?;
                    run(&m, &task.prompt, &cfg)?
                }
                other => run(&load_toy(&other)?, &task.prompt, &cfg)?,
            }
        }
        (_, Some(_)) => bail!("--task needs --suite or a config with task_suite"),
        (_, None) => {
            if a.prompt.is_empty() {
                bail!("give --prompt ids, or --suite with --task");
            }
            let prompt: Vec<TokenId> = a.prompt.iter().map(|&i| TokenId(i)).collect();
            run(&load_toy(&spec)?, &prompt, &cfg)?
        }
    };

    match &a.out {
        Some(path) => {
            let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
            write_trace(&transcript, &mut w)?;
            w.flush()?;
        }
        None => write_trace(&transcript, std::io::stdout().lock())?,
    }
    eprintln!(
        "{} steps, {} latent, termination {:?}, answer {:?}",
        transcript.steps.len(),
        transcript.latent_steps(),
        transcript.termination,
        transcript.answer.iter().map(|t| t.0).collect::<Vec<_>>()
    );
    Ok(())
}

fn run<M: LanguageModel>(m: &M, prompt: &[TokenId], cfg: &DecodeConfig) -> Result<Transcript> {
    Ok(decode(m, prompt, cfg)?)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if !a.method.is_empty() {
        cfg.methods = a.method;
    }
    if !a.tau.is_empty() {
        cfg.sweep.tau = a.tau;
    }
    if !a.gate_k.is_empty() {
        cfg.sweep.gate_k = a.gate_k;
    }
    if !a.seed.is_empty() {
        cfg.seeds = a.seed;
    }
    let out = a
        .out
        .or_else(|| cfg.output_dir.clone())
        .context("output_dir: give --out or set output_dir in the config")?;
    let rows = run_experiment(&cfg, &out, a.jobs)?;
    eprintln!("{} report rows written to {}", rows.len(), out.join(REPORT_FILE).display());
    if let Some(b) = a.baseline {
        sweep_report(&out, Some(&b))?;
    }
    Ok(())
}

fn cmd_overlap(a: OverlapArgs) -> Result<()> {
    let model = load_toy(&resolve_model(&a.model, None))?;
    let traces: Vec<Transcript> = load_traces(&a.traces)?.into_iter().map(|(_, t)| t).collect();
    let opts = OverlapOptions {
        tau: a.tau,
        ratio_bound: a.ratio_bound,
        max_n: a.max_n,
        seed: a.seed,
        profile: OverlapConfig {
            k_lens: a.k_lens,
            mixture_k: a.mixture_k,
            ..Default::default()
        },
    };
    let (raw, reg) = analyze(&model, &traces, &opts)?;
    write_overlap_csv(&a.out, &raw, &reg)?;
    eprintln!("{} branching steps over {} layers -> {}", raw.n, raw.layers.len(), a.out.display());
    Ok(())
}

fn cmd_gen_tasks(a: GenTasksArgs) -> Result<()> {
    let layout = SuiteLayout { branch_width: a.branch_width, ..Default::default() };
    let suite = gen_tasks(a.kind, a.count, a.seed, layout)?;
    suite.save(&a.out)?;
    eprintln!("{} {} tasks -> {}", suite.tasks.len(), a.kind, a.out.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let summary = sweep_report(&a.run, a.baseline.as_deref())?;
    print!("{}", gated_latent_harness::report::markdown(&summary));
    Ok(())
}
