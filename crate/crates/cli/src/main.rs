use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use lldlab_core::diagnostics::ProbeUpdate;
use lldlab_core::env::{self, EnvConfig};
use lldlab_core::trainer::{self, RolloutSettings, RunDir};
use lldlab_core::{Checkpoint, LabConfig, StepMetrics};

#[derive(Parser)]
#[command(name = "lldlab", version, about = "Likelihood-displacement laboratory for tool-integrated GRPO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus and task family.
    GenTasks(GenTasksArgs),
    /// Train and write a run directory.
    Train(TrainArgs),
    /// Run the per-sample displacement probe on a checkpoint.
    Probe(ProbeArgs),
    /// Greedy held-out evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Project metrics into a CSV.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenTasksArgs {
    #[arg(long, default_value_t = 16)]
    entities: usize,
    #[arg(long, default_value_t = 0.0)]
    hops_mix: f64,
    #[arg(long, default_value_t = 0.0)]
    prefix_share: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint name such as `step-140`, or a path.
    #[arg(long)]
    checkpoint: String,
    #[arg(long, default_value_t = 50)]
    tasks: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `<run>/probe-<checkpoint>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Defaults to the latest checkpoint.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated series.
    #[arg(long, value_delimiter = ',', required = true)]
    what: Vec<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LLDLAB_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenTasks(a) => gen_tasks(a),
        Command::Train(a) => train(a),
        Command::Probe(a) => probe(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn gen_tasks(a: GenTasksArgs) -> Result<(), Failure> {
    let mut cfg = EnvConfig {
        entities: a.entities,
        hops_mix: a.hops_mix,
        prefix_share: a.prefix_share,
        seed: a.seed,
        ..EnvConfig::default()
    };
    if let Some(v) = a.vocab_size {
        cfg.vocab_size = v;
    }
    cfg.validate().map_err(usage)?;
    let tasks = env::generate(&cfg).map_err(runtime)?;
    tasks.save(&a.out).with_context(|| format!("writing {}", a.out.display())).map_err(runtime)?;
    log::info!("wrote {} train and {} eval tasks to {}", tasks.train.len(), tasks.eval.len(), a.out.display());
    Ok(())
}

fn load_config(path: &Path) -> Result<LabConfig, Failure> {
    let bytes = fs::read(path).with_context(|| format!("cannot read config {}", path.display())).map_err(usage)?;
    serde_json::from_slice(&bytes).with_context(|| format!("invalid config {}", path.display())).map_err(usage)
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.env.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.train.total_steps = n;
    }
    if let Some(l) = a.lambda {
        cfg.reg.lambda = l;
    }
    cfg.validate().with_context(|| format!("invalid config {}", a.config.display())).map_err(usage)?;
    let summary = trainer::train_loop(&cfg, &a.out).map_err(runtime)?;
    log::info!(
        "completed {} steps ({} aborted){}",
        summary.steps_completed,
        summary.aborted_steps,
        if summary.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

fn resolve_checkpoint(run: &RunDir, name: &str) -> PathBuf {
    let p = PathBuf::from(name);
    if p.is_file() {
        return p;
    }
    let stem = name.trim_end_matches(".json");
    run.checkpoints().join(format!("{stem}.json"))
}

fn latest_checkpoint(run: &RunDir) -> anyhow::Result<PathBuf> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in
        fs::read_dir(run.checkpoints()).with_context(|| format!("no checkpoints under {}", run.root.display()))?
    {
        let path = entry?.path();
        let step = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("step-"))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    best.map(|(_, p)| p).context("run has no checkpoints")
}

fn checkpoint_step(path: &Path) -> usize {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("step-"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// Config, task set, model and parameters of a run at one checkpoint.
fn open_run(
    run: &Path,
    checkpoint: &Path,
) -> Result<(LabConfig, lldlab_core::TaskSet, lldlab_core::LinearSoftmax, lldlab_core::PolicyParams), Failure> {
    let dir = RunDir::new(run);
    let cfg = load_config(&dir.config())?;
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("cannot read checkpoint {}", checkpoint.display()))
        .map_err(usage)?;
    let (model, params) = ckpt.into_parts().map_err(runtime)?;
    let tasks = env::generate(&cfg.env).map_err(runtime)?;
    Ok((cfg, tasks, model, params))
}

fn probe(a: ProbeArgs) -> Result<(), Failure> {
    let dir = RunDir::new(&a.run);
    let ckpt = resolve_checkpoint(&dir, &a.checkpoint);
    let (cfg, tasks, model, params) = open_run(&a.run, &ckpt)?;
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
    let out = a.out.unwrap_or_else(|| a.run.join(format!("probe-{stem}")));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display())).map_err(runtime)?;
    let settings = RolloutSettings {
        group_size: cfg.grpo.group_size,
        temperature: cfg.train.temperature,
        max_action_len: cfg.train.max_action_len,
    };
    let update = ProbeUpdate { learning_rate: cfg.train.learning_rate, grpo: cfg.grpo.clone(), reg: cfg.reg.clone() };
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let step = checkpoint_step(&ckpt);
    let rows =
        trainer::probe_tasks(&model, &params, &tasks, a.tasks, &settings, &update, seed, step).map_err(runtime)?;
    let mut w = trainer::probe_writer(&out.join("probes.csv")).map_err(runtime)?;
    trainer::write_probe_rows(&mut w, &rows).map_err(runtime)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let dir = RunDir::new(&a.run);
    let ckpt = match &a.checkpoint {
        Some(name) => resolve_checkpoint(&dir, name),
        None => latest_checkpoint(&dir).map_err(usage)?,
    };
    let (cfg, tasks, model, params) = open_run(&a.run, &ckpt)?;
    let report = trainer::evaluate(
        &model,
        &params,
        &tasks.eval,
        &tasks.corpus,
        cfg.train.max_action_len,
        checkpoint_step(&ckpt),
    )
    .map_err(runtime)?;
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    write_output(a.out.as_deref(), json.as_bytes())
}

/// Column extractor for one exported series.
type Column = fn(&StepMetrics) -> Option<String>;

fn series(name: &str) -> anyhow::Result<(&'static str, Column)> {
    fn num(x: f64) -> Option<String> {
        Some(x.to_string())
    }
    Ok(match name {
        "likelihood" | "mean_correct_loglik" => ("likelihood", |m| m.mean_correct_loglik.map(|x| x.to_string())),
        "entropy" | "mean_entropy" => ("entropy", |m| num(m.mean_entropy)),
        "gradnorm" | "grad_norm" => ("gradnorm", |m| num(m.grad_norm)),
        "reward" | "mean_reward" => ("reward", |m| num(m.mean_reward)),
        "max_ratio" => ("max_ratio", |m| num(m.max_ratio)),
        "mean_ratio" => ("mean_ratio", |m| num(m.mean_ratio)),
        "length" | "mean_response_length" => ("length", |m| num(m.mean_response_length)),
        "valid_search" | "mean_valid_search" => ("valid_search", |m| num(m.mean_valid_search)),
        "frac_negative_delta" => ("frac_negative_delta", |m| m.frac_negative_delta.map(|x| x.to_string())),
        "phase" => ("phase", |m| Some(serde_json::to_value(m.phase).ok()?.as_str()?.to_string())),
        "lld_fraction" => ("lld_fraction", |m| m.lld_fraction.map(|x| x.to_string())),
        "preserving_signed_decrease" => ("preserving_signed_decrease", |m| num(m.preserving_signed_decrease)),
        "obs_match_ratio" => ("obs_match_ratio", |m| m.obs_match_ratio.map(|x| x.to_string())),
        "penalty" => ("penalty", |m| num(m.penalty)),
        other => bail!("unknown series {other:?}"),
    })
}

fn export(a: ExportArgs) -> Result<(), Failure> {
    let cols: Vec<_> = a.what.iter().map(|w| series(w.trim())).collect::<anyhow::Result<_>>().map_err(usage)?;
    let dir = RunDir::new(&a.run);
    let metrics =
        dir.read_metrics().with_context(|| format!("cannot read {}", dir.metrics().display())).map_err(usage)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = std::iter::once("step").chain(cols.iter().map(|(n, _)| *n)).collect();
    w.write_record(&header).map_err(runtime)?;
    for m in &metrics {
        let mut rec = vec![m.step.to_string()];
        rec.extend(cols.iter().map(|(_, f)| f(m).unwrap_or_default()));
        w.write_record(&rec).map_err(runtime)?;
    }
    let bytes = w.into_inner().map_err(|e| runtime(anyhow::anyhow!("{e}")))?;
    write_output(a.out.as_deref(), &bytes)
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())).map_err(runtime),
        None => std::io::stdout().write_all(bytes).context("writing stdout").map_err(runtime),
    }
}
