//! Rollout collection, updates, diagnostics scheduling and run artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::LabConfig;
use crate::diagnostics::{
    lld_record, mean_token_entropy, obs_match_ratio, phase_tag, probe_delta_x, valid_search_count, PhaseConfig,
    ProbeResult, ProbeUpdate, StepMetrics,
};
use crate::env::{self, Corpus, Task, TaskSet};
use crate::error::{LabError, Result};
use crate::grpo::{compute_advantages, ratio_stats, GrpoConfig};
use crate::lldreg::{preserving_set, PenaltyObjective, RegConfig, TotalObjective};
use crate::policy::{Gradient, LinearSoftmax, LossValue, PolicyParams, SequenceLoss};
use crate::trajectory::{RolloutGroup, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
}

/// Behavior cloning on scripted demonstrations before reinforcement learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmStart {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for WarmStart {
    fn default() -> Self {
        WarmStart { epochs: 200, learning_rate: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub queries_per_step: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub total_steps: usize,
    /// Probe every this many steps; 0 disables probing.
    pub probe_every: usize,
    /// Probe the first this many training tasks.
    pub probe_tasks: usize,
    /// 0 saves only the initial and final checkpoints.
    pub checkpoint_every: usize,
    pub temperature: f64,
    pub max_action_len: usize,
    pub abort_budget: usize,
    /// Sequential updates per step, each on a contiguous slice of the batch.
    pub minibatches: usize,
    pub warmstart: Option<WarmStart>,
    pub lld_threshold: f64,
    pub phase: PhaseConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            queries_per_step: 8,
            learning_rate: 0.05,
            optimizer: Optimizer::Sgd,
            total_steps: 300,
            probe_every: 10,
            probe_tasks: 50,
            checkpoint_every: 50,
            temperature: 1.0,
            max_action_len: 4,
            abort_budget: 5,
            minibatches: 1,
            warmstart: Some(WarmStart::default()),
            lld_threshold: 0.0,
            phase: PhaseConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        if self.queries_per_step == 0 {
            return bad("queries_per_step must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return bad(format!("momentum beta must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!("temperature must be finite and >= 0, got {}", self.temperature));
        }
        if self.max_action_len == 0 {
            return bad("max_action_len must be >= 1".into());
        }
        if self.minibatches == 0 || self.minibatches > self.queries_per_step {
            return bad(format!("minibatches must lie in 1..={}", self.queries_per_step));
        }
        Ok(())
    }
}

/// Mixes a base seed with a path of indices into an independent stream seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(splitmix(base), |acc, &x| splitmix(acc.rotate_left(23) ^ splitmix(x)))
}

const STREAM_BATCH: u64 = 0;
const STREAM_ROLLOUT: u64 = 1;
const STREAM_PROBE: u64 = 2;

/// Sampling settings for one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    pub group_size: usize,
    pub temperature: f64,
    pub max_action_len: usize,
}

/// Samples `G` responses to `task` under `p`, scores them, and records the
/// snapshot log-probabilities and advantages.
pub fn collect_group(
    model: &LinearSoftmax,
    p: &PolicyParams,
    task: &Task,
    corpus: &Corpus,
    settings: &RolloutSettings,
    grpo: &GrpoConfig,
    seed: u64,
) -> Result<RolloutGroup> {
    let roles = *model.vocab.roles();
    let stops = roles.stop_tokens();
    let mut trajectories = Vec::with_capacity(settings.group_size);
    for g in 0..settings.group_size {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[g as u64]));
        let t = env::rollout(task, corpus, &roles, |history, turn| {
            model.sample_action(p, history, turn, &stops, settings.max_action_len, settings.temperature, &mut rng)
        })?;
        trajectories.push(t);
    }
    let rewards: Vec<f64> = trajectories.iter().map(|t| env::reward(t, task)).collect();
    let adv = compute_advantages(&rewards, grpo);
    let old = model.batch_log_probs(p, &trajectories)?;
    Ok(RolloutGroup {
        query_id: task.query_id.clone(),
        trajectories,
        rewards,
        advantages: adv.values,
        old_logprobs: Some(old),
        params_version: Some(p.version),
        degenerate: adv.degenerate,
    })
}

/// Optimizer state carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Option<Gradient>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState { velocity: None }
    }

    /// Applies one descent step along `grad`.
    pub fn update(&mut self, p: &mut PolicyParams, grad: &Gradient, opt: Optimizer, lr: f64) -> Result<()> {
        match opt {
            Optimizer::Sgd => p.apply(grad, -lr),
            Optimizer::Momentum { beta } => {
                let v = self.velocity.get_or_insert_with(|| Gradient::zeros(grad.rows, grad.cols));
                for (vi, gi) in v.values.iter_mut().zip(&grad.values) {
                    *vi = beta * *vi + gi;
                }
                p.apply(v, -lr)
            }
        }
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new()
    }
}

/// Everything `train_step` needs besides the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSettings {
    pub grpo: GrpoConfig,
    pub reg: RegConfig,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub minibatches: usize,
    pub lld_threshold: f64,
}

impl StepSettings {
    pub fn from_config(cfg: &LabConfig) -> Self {
        StepSettings {
            grpo: cfg.grpo.clone(),
            reg: cfg.reg.clone(),
            learning_rate: cfg.train.learning_rate,
            optimizer: cfg.train.optimizer,
            minibatches: cfg.train.minibatches,
            lld_threshold: cfg.train.lld_threshold,
        }
    }
}

/// Mean of the per-group total-loss gradients.
fn batch_gradient(
    model: &LinearSoftmax,
    p: &PolicyParams,
    groups: &[&RolloutGroup],
    grpo: &GrpoConfig,
    reg: &RegConfig,
) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::zeros(p.rows, p.cols);
    let mut loss = 0.0;
    let scale = 1.0 / groups.len() as f64;
    for g in groups {
        let objective = TotalObjective::new(g, grpo, reg)?;
        let (l, gr) = model.loss_and_grad(p, &g.trajectories, &objective)?;
        loss += scale * l;
        grad.add_scaled(&gr, scale);
    }
    Ok((loss, grad))
}

/// One optimization step over a batch of groups collected under `p`.
///
/// Degenerate groups are dropped and counted. The usable groups are split
/// into `minibatches` contiguous slices, and every inner epoch applies one
/// update per slice. A non-finite gradient or parameter restores the
/// snapshot and returns metrics flagged `aborted`. The phase tag and probe
/// fraction are left for the caller.
pub fn train_step(
    model: &LinearSoftmax,
    p: &mut PolicyParams,
    opt_state: &mut OptimizerState,
    groups: &[RolloutGroup],
    settings: &StepSettings,
    step: usize,
) -> Result<StepMetrics> {
    for g in groups {
        g.check()?;
        if g.params_version != Some(p.version) {
            return Err(LabError::StaleGroup(format!(
                "group {} was collected under version {:?}, params are at {}",
                g.query_id, g.params_version, p.version
            )));
        }
    }
    let theta_old = p.clone();
    let saved_opt = opt_state.clone();
    let usable: Vec<&RolloutGroup> = groups.iter().filter(|g| !g.degenerate).collect();
    let degenerate_groups = groups.len() - usable.len();

    let mut grad_norm = 0.0;
    let mut aborted = false;
    if !usable.is_empty() {
        let chunks = split_even(&usable, settings.minibatches.min(usable.len()));
        let outcome = (|| -> Result<f64> {
            let (_, full) = batch_gradient(model, &theta_old, &usable, &settings.grpo, &settings.reg)?;
            let norm = full.l2_norm();
            for _ in 0..settings.grpo.inner_epochs {
                for chunk in &chunks {
                    let grad = if chunks.len() == 1 && p.version == theta_old.version {
                        full.clone()
                    } else {
                        batch_gradient(model, p, chunk, &settings.grpo, &settings.reg)?.1
                    };
                    opt_state.update(p, &grad, settings.optimizer, settings.learning_rate)?;
                    if !p.is_finite() {
                        return Err(LabError::NumericOverflow { position: "parameters after update".into() });
                    }
                }
            }
            Ok(norm)
        })();
        match outcome {
            Ok(n) => grad_norm = n,
            Err(LabError::NumericOverflow { position }) => {
                log::warn!("numeric-overflow at step {step} ({position}); keeping previous parameters");
                *p = theta_old.clone();
                *opt_state = saved_opt;
                aborted = true;
                grad_norm = f64::NAN;
            }
            Err(e) => return Err(e),
        }
    }
    let mut metrics = step_metrics(model, &theta_old, p, groups, &usable, settings, step)?;
    metrics.degenerate_groups = degenerate_groups;
    metrics.aborted = aborted;
    metrics.grad_norm = if grad_norm.is_finite() { grad_norm } else { 0.0 };
    Ok(metrics)
}

fn split_even<'a>(items: &[&'a RolloutGroup], parts: usize) -> Vec<Vec<&'a RolloutGroup>> {
    let parts = parts.max(1);
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn step_metrics(
    model: &LinearSoftmax,
    theta_old: &PolicyParams,
    theta_new: &PolicyParams,
    groups: &[RolloutGroup],
    usable: &[&RolloutGroup],
    settings: &StepSettings,
    step: usize,
) -> Result<StepMetrics> {
    let roles = *model.vocab.roles();
    let all: Vec<&Trajectory> = groups.iter().flat_map(|g| &g.trajectories).collect();
    let n = all.len().max(1) as f64;
    let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();

    let mut correct_ll = Vec::new();
    for g in groups {
        let old = g.old_logprobs()?;
        for i in g.correct_indices() {
            correct_ll.extend_from_slice(&old[i]);
        }
    }
    let owned: Vec<Trajectory> = all.iter().map(|t| (*t).clone()).collect();
    let mean_entropy = mean_token_entropy(model, theta_old, &owned)?;
    let mean_response_length = all.iter().map(|t| t.masked_count() as f64).sum::<f64>() / n;
    let mean_valid_search = all.iter().map(|t| valid_search_count(t, &roles) as f64).sum::<f64>() / n;

    let mut ratio_max: f64 = 1.0;
    let (mut ratio_sum, mut ratio_n) = (0.0, 0usize);
    let mut correct_deltas = Vec::new();
    let mut lld_flags = 0usize;
    let mut preserving_signed_decrease = 0.0;
    let mut penalties = Vec::new();
    let mut obs = Vec::new();
    for g in usable {
        let old = g.old_logprobs()?;
        let new = model.batch_log_probs(theta_new, &g.trajectories)?;
        let (mx, mn) = ratio_stats(old, &new);
        let tokens: usize = new.iter().map(Vec::len).sum();
        if tokens > 0 {
            ratio_max = if ratio_n == 0 { mx } else { ratio_max.max(mx) };
            ratio_sum += mn * tokens as f64;
            ratio_n += tokens;
        }
        for i in g.correct_indices() {
            let rec = lld_record(model, theta_old, theta_new, &g.trajectories[i], settings.lld_threshold)?;
            lld_flags += usize::from(rec.lld_flag);
            correct_deltas.push(rec.response_delta);
        }
        for i in preserving_set(g) {
            preserving_signed_decrease += old[i].iter().zip(&new[i]).map(|(o, nw)| o - nw).sum::<f64>();
        }
        penalties.push(PenaltyObjective::new(g, settings.reg.variant)?.evaluate(&new)?.value);
        if let Ok(r) = obs_match_ratio(g, &roles) {
            obs.push(r);
        }
    }
    Ok(StepMetrics {
        step,
        mean_reward: mean(&rewards).unwrap_or(0.0),
        mean_correct_loglik: mean(&correct_ll),
        mean_entropy,
        grad_norm: 0.0,
        max_ratio: ratio_max,
        mean_ratio: if ratio_n == 0 { 1.0 } else { ratio_sum / ratio_n as f64 },
        mean_response_length,
        mean_valid_search,
        frac_negative_delta: None,
        phase: crate::diagnostics::Phase::None,
        groups_used: usable.len(),
        degenerate_groups: 0,
        lld_fraction: (!correct_deltas.is_empty()).then(|| lld_flags as f64 / correct_deltas.len() as f64),
        mean_correct_delta: mean(&correct_deltas),
        preserving_signed_decrease,
        obs_match_ratio: mean(&obs),
        penalty: mean(&penalties).unwrap_or(0.0),
        aborted: false,
    })
}

/// Mean negative log-likelihood per masked token.
struct Imitation;

impl SequenceLoss for Imitation {
    fn evaluate(&self, logprobs: &[Vec<f64>]) -> Result<LossValue> {
        let n: usize = logprobs.iter().map(Vec::len).sum();
        let norm = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let value = -norm * logprobs.iter().flatten().sum::<f64>();
        let dlogp = logprobs.iter().map(|r| vec![-norm; r.len()]).collect();
        Ok(LossValue { value, dlogp })
    }
}

/// Behavior cloning on one scripted demonstration per task.
pub fn warm_start(
    model: &LinearSoftmax,
    p: &mut PolicyParams,
    tasks: &[Task],
    corpus: &Corpus,
    ws: &WarmStart,
) -> Result<f64> {
    let roles = *model.vocab.roles();
    let demos: Vec<Trajectory> =
        tasks.iter().map(|t| env::scripted_rollout(t, corpus, &roles)).collect::<Result<_>>()?;
    let mut loss = f64::NAN;
    for _ in 0..ws.epochs {
        let (l, grad) = model.loss_and_grad(p, &demos, &Imitation)?;
        loss = l;
        p.apply(&grad, -ws.learning_rate)?;
    }
    Ok(loss)
}

/// Greedy-decoding exact match on `tasks`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub em: f64,
    pub n_tasks: usize,
    pub correct: usize,
}

pub fn evaluate(
    model: &LinearSoftmax,
    p: &PolicyParams,
    tasks: &[Task],
    corpus: &Corpus,
    max_action_len: usize,
    step: usize,
) -> Result<EvalReport> {
    let roles = *model.vocab.roles();
    let stops = roles.stop_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0;
    for task in tasks {
        let t = env::rollout(task, corpus, &roles, |h, turn| {
            model.sample_action(p, h, turn, &stops, max_action_len, 0.0, &mut rng)
        })?;
        correct += usize::from(env::reward(&t, task) > 0.5);
    }
    let em = if tasks.is_empty() { 0.0 } else { correct as f64 / tasks.len() as f64 };
    Ok(EvalReport { step, em, n_tasks: tasks.len(), correct })
}

/// One row of the probe table; `delta_x` is absent for uniform groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub step: usize,
    pub query_id: String,
    pub delta_x: Option<f64>,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// In-memory training state over a generated task set.
pub struct Trainer {
    pub config: LabConfig,
    pub tasks: TaskSet,
    pub model: LinearSoftmax,
    pub params: PolicyParams,
    pub opt_state: OptimizerState,
    pub history: Vec<StepMetrics>,
    pub aborts: usize,
    pub step: usize,
}

impl Trainer {
    /// Generates the task set, builds the policy and runs the warm start.
    pub fn new(config: LabConfig) -> Result<Self> {
        config.validate()?;
        let tasks = env::generate(&config.env)?;
        let model = LinearSoftmax::new(tasks.vocab.clone(), config.policy)?;
        let mut params = model.zero_params();
        if let Some(ws) = &config.train.warmstart {
            let loss = warm_start(&model, &mut params, &tasks.train, &tasks.corpus, ws)?;
            log::info!("warm start finished, imitation loss {loss:.4}");
        }
        params.version = 0;
        Ok(Trainer {
            config,
            tasks,
            model,
            params,
            opt_state: OptimizerState::new(),
            history: Vec::new(),
            aborts: 0,
            step: 0,
        })
    }

    fn settings(&self) -> RolloutSettings {
        RolloutSettings {
            group_size: self.config.grpo.group_size,
            temperature: self.config.train.temperature,
            max_action_len: self.config.train.max_action_len,
        }
    }

    /// Draws this step's queries and collects their groups.
    pub fn collect_batch(&self) -> Result<Vec<RolloutGroup>> {
        let seed = self.config.train.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_BATCH, self.step as u64]));
        let settings = self.settings();
        (0..self.config.train.queries_per_step)
            .map(|q| {
                let task = env::pick(&self.tasks.train, &mut rng);
                let s = derive_seed(seed, &[STREAM_ROLLOUT, self.step as u64, q as u64]);
                collect_group(&self.model, &self.params, task, &self.tasks.corpus, &settings, &self.config.grpo, s)
            })
            .collect()
    }

    /// Collects a batch, updates the parameters and tags the phase.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let groups = self.collect_batch()?;
        let settings = StepSettings::from_config(&self.config);
        let mut m = train_step(&self.model, &mut self.params, &mut self.opt_state, &groups, &settings, self.step)?;
        if m.aborted {
            self.aborts += 1;
        }
        self.history.push(m.clone());
        m.phase = phase_tag(&self.history, &self.config.train.phase);
        self.history.last_mut().expect("just pushed").phase = m.phase;
        self.step += 1;
        Ok(m)
    }

    /// Per-sample probe over the first `n` training tasks at the current
    /// parameters, labeled with `step`.
    pub fn probe(&self, n: usize, step: usize) -> Result<Vec<ProbeRow>> {
        let update = ProbeUpdate {
            learning_rate: self.config.train.learning_rate,
            grpo: self.config.grpo.clone(),
            reg: self.config.reg.clone(),
        };
        probe_tasks(&self.model, &self.params, &self.tasks, n, &self.settings(), &update, self.config.train.seed, step)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(
            &self.model,
            &self.params,
            &self.tasks.eval,
            &self.tasks.corpus,
            self.config.train.max_action_len,
            self.step,
        )
    }
}

/// Collects one group per probed task and runs the displacement probe on it.
#[allow(clippy::too_many_arguments)]
pub fn probe_tasks(
    model: &LinearSoftmax,
    p: &PolicyParams,
    tasks: &TaskSet,
    n: usize,
    settings: &RolloutSettings,
    update: &ProbeUpdate,
    seed: u64,
    step: usize,
) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();
    for (i, task) in tasks.train.iter().take(n).enumerate() {
        let s = derive_seed(seed, &[STREAM_PROBE, step as u64, i as u64]);
        let group = collect_group(model, p, task, &tasks.corpus, settings, &update.grpo, s)?;
        let n_correct = group.correct_indices().len();
        let row = match probe_delta_x(model, p, &group, update) {
            Ok(ProbeResult { delta_x, .. }) => Some(delta_x),
            Err(LabError::UniformGroup) => None,
            Err(e) => return Err(e),
        };
        rows.push(ProbeRow {
            step,
            query_id: task.query_id.clone(),
            delta_x: row,
            n_correct,
            n_incorrect: group.len() - n_correct,
        });
    }
    Ok(rows)
}

/// Fraction of defined probe values below zero.
pub fn frac_negative(rows: &[ProbeRow]) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(|r| r.delta_x).collect();
    (!vals.is_empty()).then(|| vals.iter().filter(|&&d| d < 0.0).count() as f64 / vals.len() as f64)
}

/// Paths of a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }
    pub fn probes(&self) -> PathBuf {
        self.root.join("probes.csv")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step-{step}.json"))
    }

    pub fn read_metrics(&self) -> Result<Vec<StepMetrics>> {
        let text = fs::read_to_string(self.metrics())?;
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    pub fn read_probes(&self) -> Result<Vec<ProbeRow>> {
        read_probe_csv(&self.probes())
    }
}

pub fn write_probe_rows<W: Write>(w: &mut csv::Writer<W>, rows: &[ProbeRow]) -> Result<()> {
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn probe_writer(path: &Path) -> Result<csv::Writer<File>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["step", "query_id", "delta_x", "n_correct", "n_incorrect"])?;
    w.flush()?;
    Ok(w)
}

pub fn read_probe_csv(path: &Path) -> Result<Vec<ProbeRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Outcome of a full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps_completed: usize,
    pub aborted_steps: usize,
    pub stopped_early: bool,
    pub eval: Option<EvalReport>,
}

/// Runs the configured number of steps and writes the run directory.
pub fn train_loop(config: &LabConfig, out: &Path) -> Result<RunSummary> {
    let dir = RunDir::new(out);
    fs::create_dir_all(dir.checkpoints())?;
    config.save(&dir.config())?;
    let mut trainer = Trainer::new(config.clone())?;
    let mut metrics = BufWriter::new(File::create(dir.metrics())?);
    let mut probes = probe_writer(&dir.probes())?;
    trainer.model.checkpoint(&trainer.params).save(&dir.checkpoint(0))?;

    let tc = config.train.clone();
    let mut stopped_early = false;
    for s in 0..tc.total_steps {
        let mut m = trainer.step()?;
        let done = s + 1;
        if tc.probe_every > 0 && done % tc.probe_every == 0 {
            let rows = trainer.probe(tc.probe_tasks, done)?;
            m.frac_negative_delta = frac_negative(&rows);
            trainer.history.last_mut().expect("step recorded").frac_negative_delta = m.frac_negative_delta;
            write_probe_rows(&mut probes, &rows)?;
        }
        serde_json::to_writer(&mut metrics, &m)?;
        metrics.write_all(b"\n")?;
        log::debug!("step {s}: reward {:.3} grad {:.4} phase {:?}", m.mean_reward, m.grad_norm, m.phase);
        if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 {
            trainer.model.checkpoint(&trainer.params).save(&dir.checkpoint(done))?;
        }
        if trainer.aborts > tc.abort_budget {
            log::warn!("abort budget of {} exhausted at step {s}; stopping", tc.abort_budget);
            stopped_early = true;
            break;
        }
    }
    metrics.flush()?;
    let last = dir.checkpoint(trainer.step);
    if !last.exists() {
        trainer.model.checkpoint(&trainer.params).save(&last)?;
    }
    let eval = if tc.total_steps > 0 {
        let report = trainer.evaluate()?;
        fs::write(dir.eval(), serde_json::to_vec_pretty(&report)?)?;
        log::info!("held-out EM {:.3} over {} tasks", report.em, report.n_tasks);
        Some(report)
    } else {
        None
    };
    Ok(RunSummary { steps_completed: trainer.step, aborted_steps: trainer.aborts, stopped_early, eval })
}
