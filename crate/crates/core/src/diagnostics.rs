//! Measurements of likelihood displacement and training health.

use serde::{Deserialize, Serialize};

use crate::env::{parse_action, ParsedAction};
use crate::error::{LabError, Result};
use crate::grpo::GrpoConfig;
use crate::lldreg::{RegConfig, TotalObjective};
use crate::policy::{log_softmax, LinearSoftmax, PolicyParams};
use crate::trajectory::{RolloutGroup, SegmentKind, Trajectory};
use crate::vocab::Roles;

/// Per-action log-likelihood changes of one response between two policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LldRecord {
    pub action_deltas: Vec<f64>,
    pub response_delta: f64,
    pub lld_flag: bool,
}

/// `Δ_t`: change of action `t`'s total log-probability, both policies
/// conditioned on the same recorded context.
pub fn action_delta(
    model: &LinearSoftmax,
    theta_old: &PolicyParams,
    theta_fin: &PolicyParams,
    traj: &Trajectory,
    t: usize,
) -> Result<f64> {
    let range = traj
        .masked_range_of_action(t)
        .ok_or_else(|| LabError::InvalidTrajectory(format!("action {t} out of range ({} actions)", traj.turn_count)))?;
    let old = model.log_prob(theta_old, traj)?.per_token;
    let fin = model.log_prob(theta_fin, traj)?.per_token;
    Ok(range.map(|k| fin[k] - old[k]).sum())
}

/// All action deltas of `traj`; flags LLD when the response total is at or
/// below `threshold`.
pub fn lld_record(
    model: &LinearSoftmax,
    theta_old: &PolicyParams,
    theta_fin: &PolicyParams,
    traj: &Trajectory,
    threshold: f64,
) -> Result<LldRecord> {
    let old = model.log_prob(theta_old, traj)?.per_token;
    let fin = model.log_prob(theta_fin, traj)?.per_token;
    let action_deltas: Vec<f64> = (0..traj.turn_count)
        .map(|t| traj.masked_range_of_action(t).map(|r| r.map(|k| fin[k] - old[k]).sum()).unwrap_or(0.0))
        .collect();
    let response_delta = action_deltas.iter().sum();
    Ok(LldRecord { action_deltas, response_delta, lld_flag: response_delta <= threshold })
}

/// Settings for the single probe update.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeUpdate {
    pub learning_rate: f64,
    pub grpo: GrpoConfig,
    pub reg: RegConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub query_id: String,
    pub delta_x: f64,
    pub n_correct: usize,
    pub n_incorrect: usize,
}

/// Per-sample displacement probe: start from `theta_init`, take one update
/// on this group alone and return the mean change of the correct responses'
/// masked log-likelihood. `theta_init` itself is never modified.
pub fn probe_delta_x(
    model: &LinearSoftmax,
    theta_init: &PolicyParams,
    group: &RolloutGroup,
    update: &ProbeUpdate,
) -> Result<ProbeResult> {
    let correct = group.correct_indices();
    let n_incorrect = group.len() - correct.len();
    if correct.is_empty() || n_incorrect == 0 {
        return Err(LabError::UniformGroup);
    }
    let objective = TotalObjective::new(group, &update.grpo, &update.reg)?;
    let (_, grad) = model.loss_and_grad(theta_init, &group.trajectories, &objective)?;
    let mut theta = theta_init.clone();
    theta.apply(&grad, -update.learning_rate)?;
    let mut total = 0.0;
    for &i in &correct {
        let t = &group.trajectories[i];
        total += model.log_prob(&theta, t)?.total - model.log_prob(theta_init, t)?.total;
    }
    Ok(ProbeResult {
        query_id: group.query_id.clone(),
        delta_x: total / correct.len() as f64,
        n_correct: correct.len(),
        n_incorrect,
    })
}

/// Search actions that were answered with an information segment.
pub fn valid_search_count(traj: &Trajectory, roles: &Roles) -> usize {
    let segs = &traj.segments;
    segs.iter()
        .enumerate()
        .filter(|(i, s)| {
            s.kind == SegmentKind::Action
                && matches!(parse_action(s, roles), ParsedAction::Search(_))
                && segs
                    .get(i + 1)
                    .is_some_and(|fb| fb.kind == SegmentKind::Feedback && fb.tokens.first() == Some(&roles.info_open))
        })
        .count()
}

/// Documents of the first information feedback, sorted.
pub fn first_observation(traj: &Trajectory, roles: &Roles) -> Option<Vec<u32>> {
    traj.feedbacks().find(|f| f.tokens.first() == Some(&roles.info_open)).map(|f| {
        let mut docs: Vec<u32> = f.tokens[1..f.tokens.len().saturating_sub(1)].to_vec();
        docs.sort_unstable();
        docs
    })
}

/// Fraction of incorrect responses whose first retrieved document set equals
/// that of some correct response in the group.
pub fn obs_match_ratio(group: &RolloutGroup, roles: &Roles) -> Result<f64> {
    let correct = group.correct_indices();
    if correct.is_empty() {
        return Err(LabError::NoReference);
    }
    let references: Vec<Vec<u32>> =
        correct.iter().filter_map(|&i| first_observation(&group.trajectories[i], roles)).collect();
    let incorrect = group.incorrect_indices();
    if incorrect.is_empty() {
        return Ok(0.0);
    }
    let matched = incorrect
        .iter()
        .filter(|&&j| first_observation(&group.trajectories[j], roles).is_some_and(|obs| references.contains(&obs)))
        .count();
    Ok(matched as f64 / incorrect.len() as f64)
}

/// Mean next-token entropy over every masked token of `trajs`.
pub fn mean_token_entropy(model: &LinearSoftmax, p: &PolicyParams, trajs: &[Trajectory]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in trajs {
        for ctx in model.token_contexts(t)? {
            let lp = log_softmax(&model.logits(p, &ctx.active));
            sum += crate::policy::entropy_of(&lp);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
    #[serde(rename = "none")]
    None,
}

/// Calibration constants of the phase tagger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub window: usize,
    /// Per-token likelihood slope (nats/step) below which the curve is flat.
    pub s0: f64,
    /// Slope magnitude separating steady decay from collapse.
    pub s1: f64,
    /// Gradient-norm surge factor relative to the window median.
    pub g1_factor: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig { window: 20, s0: 1e-3, s1: 1e-2, g1_factor: 2.0 }
    }
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Tags the trailing window of `history`.
///
/// Likelihood slope is fitted over steps that had correct responses. The
/// gradient surge is the fitted rise of the gradient norm across the window.
/// III: slope < −s1, or slope < −s0 together with a surge above
/// `g1_factor × median`. II: −s1 ≤ slope ≤ −s0. I: |slope| < s0.
pub fn phase_tag(history: &[StepMetrics], cfg: &PhaseConfig) -> Phase {
    if cfg.window < 2 || history.len() < cfg.window {
        return Phase::None;
    }
    let win = &history[history.len() - cfg.window..];
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        win.iter().filter_map(|m| m.mean_correct_loglik.map(|l| (m.step as f64, l))).unzip();
    let Some(slope) = ols_slope(&xs, &ys) else { return Phase::None };
    let steps: Vec<f64> = win.iter().map(|m| m.step as f64).collect();
    let norms: Vec<f64> = win.iter().map(|m| m.grad_norm).collect();
    let surge = ols_slope(&steps, &norms)
        .map(|s| s * (steps[steps.len() - 1] - steps[0]) > cfg.g1_factor * median(&norms))
        .unwrap_or(false);
    if slope < -cfg.s1 || (slope < -cfg.s0 && surge) {
        Phase::III
    } else if slope <= -cfg.s0 {
        Phase::II
    } else if slope.abs() < cfg.s0 {
        Phase::I
    } else {
        Phase::None
    }
}

/// One training step's diagnostics; serialized as one metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean per-token log-likelihood of correct responses under θ_old.
    pub mean_correct_loglik: Option<f64>,
    pub mean_entropy: f64,
    pub grad_norm: f64,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    /// Mean number of action tokens per response.
    pub mean_response_length: f64,
    pub mean_valid_search: f64,
    /// Fraction of probed samples with Δ(x) < 0; absent on non-probe steps.
    pub frac_negative_delta: Option<f64>,
    pub phase: Phase,
    pub groups_used: usize,
    pub degenerate_groups: usize,
    /// Mean response-level Δ of correct responses, θ_old → θ_new.
    pub mean_correct_delta: Option<f64>,
    /// Fraction of correct responses flagged with LLD across the update.
    pub lld_fraction: Option<f64>,
    /// Σ over preserving responses of Σ_k (lp_old − lp_new), θ_old → θ_new.
    pub preserving_signed_decrease: f64,
    pub obs_match_ratio: Option<f64>,
    pub penalty: f64,
    pub aborted: bool,
}

/// Similarity weights applied to the two halves of the interaction score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GwhesWeights {
    pub p_pos: f64,
    pub p_neg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTerm {
    /// Token index inside the target action.
    pub target_token: usize,
    pub response: usize,
    /// Masked-token index inside `response`.
    pub token: usize,
    pub correct: bool,
    /// Inner product of the two prediction-error vectors.
    pub alpha: f64,
    /// Inner product of the two feature vectors.
    pub feature_inner: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwhesReport {
    pub response: usize,
    pub action: usize,
    pub negative_term: f64,
    pub positive_term: f64,
    /// `negative_term − positive_term`.
    pub g: f64,
    pub p_pos: f64,
    pub p_neg: f64,
    /// "mean-abs-advantage" when defaulted, "explicit" otherwise.
    pub weights_source: String,
    /// Masked tokens in the group (the surrogate's normalizer).
    pub token_normalizer: usize,
    /// First-order rate of the target action's log-likelihood under one
    /// unit-rate ascent step on the unclipped surrogate: `−g / normalizer`.
    pub predicted_rate: f64,
    pub pairs: Vec<PairTerm>,
}

/// Gradient-interaction score of action `action` of correct response
/// `response`: prediction-error similarity times feature similarity, summed
/// against every incorrect token (negative term) and every correct token
/// (positive term).
pub fn gwhes_score(
    model: &LinearSoftmax,
    p: &PolicyParams,
    group: &RolloutGroup,
    response: usize,
    action: usize,
    weights: Option<GwhesWeights>,
) -> Result<GwhesReport> {
    if response >= group.len() {
        return Err(LabError::InvalidTrajectory(format!("response {response} outside group")));
    }
    let correct = group.correct_indices();
    let incorrect = group.incorrect_indices();
    let mean_abs = |idx: &[usize]| {
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&i| group.advantages[i].abs()).sum::<f64>() / idx.len() as f64
        }
    };
    let (w, source) = match weights {
        Some(w) => (w, "explicit"),
        None => (GwhesWeights { p_pos: mean_abs(&correct), p_neg: mean_abs(&incorrect) }, "mean-abs-advantage"),
    };

    // prediction-error vectors and active features of every masked token
    let mut errors: Vec<Vec<(Vec<f64>, Vec<usize>)>> = Vec::with_capacity(group.len());
    for t in &group.trajectories {
        let mut rows = Vec::new();
        for ctx in model.token_contexts(t)? {
            let lp = log_softmax(&model.logits(p, &ctx.active));
            let mut err: Vec<f64> = lp.iter().map(|l| -l.exp()).collect();
            err[ctx.target as usize] += 1.0;
            let mut active = ctx.active;
            active.sort_unstable();
            rows.push((err, active));
        }
        errors.push(rows);
    }
    let target = group.trajectories[response]
        .masked_range_of_action(action)
        .ok_or_else(|| LabError::InvalidTrajectory(format!("response {response} has no action {action}")))?;

    let mut pairs = Vec::new();
    let (mut neg, mut pos) = (0.0, 0.0);
    for (ti, k) in target.clone().enumerate() {
        let (err_a, act_a) = &errors[response][k];
        for (j, rows) in errors.iter().enumerate() {
            let is_correct = group.rewards[j] > 0.5;
            for (kk, (err_b, act_b)) in rows.iter().enumerate() {
                let alpha: f64 = err_a.iter().zip(err_b).map(|(a, b)| a * b).sum();
                let inner = sorted_overlap(act_a, act_b) as f64;
                if is_correct {
                    pos += alpha * inner;
                } else {
                    neg += alpha * inner;
                }
                pairs.push(PairTerm {
                    target_token: ti,
                    response: j,
                    token: kk,
                    correct: is_correct,
                    alpha,
                    feature_inner: inner,
                });
            }
        }
    }
    let negative_term = w.p_neg * neg;
    let positive_term = w.p_pos * pos;
    let g = negative_term - positive_term;
    let normalizer = group.total_masked();
    Ok(GwhesReport {
        response,
        action,
        negative_term,
        positive_term,
        g,
        p_pos: w.p_pos,
        p_neg: w.p_neg,
        weights_source: source.to_string(),
        token_normalizer: normalizer,
        predicted_rate: if normalizer == 0 { 0.0 } else { -g / normalizer as f64 },
        pairs,
    })
}

fn sorted_overlap(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}
