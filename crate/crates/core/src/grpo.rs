//! Feedback-masked GRPO: group-normalized advantages and the clipped
//! token-level surrogate averaged over all action tokens of the group.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{LinearSoftmax, LossValue, PolicyParams, SequenceLoss};
use crate::trajectory::RolloutGroup;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum StdGuard {
    /// Uniform-reward groups are flagged and dropped by the trainer.
    DiscardUniform,
    /// σ is replaced by σ + value; uniform groups are still flagged.
    Epsilon(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub std_guard: StdGuard,
    pub inner_epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig { group_size: 8, clip_eps: 0.2, std_guard: StdGuard::DiscardUniform, inner_epochs: 1 }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(LabError::InvalidConfig(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(LabError::InvalidConfig(format!("clip_eps must lie in (0,1), got {}", self.clip_eps)));
        }
        if self.inner_epochs == 0 {
            return Err(LabError::InvalidConfig("inner_epochs must be >= 1".into()));
        }
        if let StdGuard::Epsilon(e) = self.std_guard {
            if !(e.is_finite() && e > 0.0) {
                return Err(LabError::InvalidConfig(format!("std guard epsilon must be positive, got {e}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub values: Vec<f64>,
    /// All rewards equal; the group carries no learning signal.
    pub degenerate: bool,
}

/// `Â_i = (r_i − μ) / σ` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Advantages {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Advantages { values: Vec::new(), degenerate: true };
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let degenerate = rewards.windows(2).all(|w| w[0] == w[1]);
    if degenerate {
        return Advantages { values: vec![0.0; rewards.len()], degenerate };
    }
    let sigma = match cfg.std_guard {
        StdGuard::DiscardUniform => var.sqrt(),
        StdGuard::Epsilon(e) => var.sqrt() + e,
    };
    Advantages { values: rewards.iter().map(|r| (r - mean) / sigma).collect(), degenerate }
}

/// Per-token surrogate term `min(γÂ, clip(γ, 1−ε, 1+ε)Â)` and its
/// derivative with respect to log γ (zero on the clipped branch).
pub fn clipped_term(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let (lo, hi) = (1.0 - eps, 1.0 + eps);
    let unclipped = ratio * adv;
    if ratio > lo && ratio < hi {
        return (unclipped, unclipped);
    }
    let clipped = ratio.clamp(lo, hi) * adv;
    if unclipped < clipped {
        (unclipped, unclipped)
    } else {
        // clipped branch, including the kink itself
        (clipped, 0.0)
    }
}

/// Negated GRPO objective of one group, as a loss over new log-probabilities.
pub struct GrpoObjective<'a> {
    group: &'a RolloutGroup,
    old: &'a [Vec<f64>],
    clip_eps: f64,
}

impl<'a> GrpoObjective<'a> {
    pub fn new(group: &'a RolloutGroup, cfg: &GrpoConfig) -> Result<Self> {
        let old = group.old_logprobs()?;
        if group.advantages.len() != group.len() {
            return Err(LabError::StaleGroup(format!("group {} lacks advantages", group.query_id)));
        }
        Ok(GrpoObjective { group, old, clip_eps: cfg.clip_eps })
    }
}

impl SequenceLoss for GrpoObjective<'_> {
    fn evaluate(&self, logprobs: &[Vec<f64>]) -> Result<LossValue> {
        check_alignment(self.old, logprobs)?;
        let n_tokens = self.group.total_masked();
        let mut dlogp: Vec<Vec<f64>> = logprobs.iter().map(|r| vec![0.0; r.len()]).collect();
        if n_tokens == 0 {
            return Ok(LossValue { value: 0.0, dlogp });
        }
        let norm = 1.0 / n_tokens as f64;
        let mut objective = 0.0;
        for (i, (new_row, old_row)) in logprobs.iter().zip(self.old).enumerate() {
            let adv = self.group.advantages[i];
            for (k, (&lp_new, &lp_old)) in new_row.iter().zip(old_row).enumerate() {
                let ratio = (lp_new - lp_old).exp();
                let (term, dterm) = clipped_term(ratio, adv, self.clip_eps);
                objective += term;
                dlogp[i][k] = -norm * dterm;
            }
        }
        Ok(LossValue { value: -norm * objective, dlogp })
    }
}

pub(crate) fn check_alignment(old: &[Vec<f64>], new: &[Vec<f64>]) -> Result<()> {
    if old.len() != new.len() {
        return Err(LabError::LogprobMisalign { expected: old.len(), got: new.len() });
    }
    for (o, n) in old.iter().zip(new) {
        if o.len() != n.len() {
            return Err(LabError::LogprobMisalign { expected: o.len(), got: n.len() });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateReport {
    pub loss: f64,
    pub max_ratio: f64,
    pub mean_ratio: f64,
}

/// Evaluates the surrogate of `group` at `p`, with ratio diagnostics.
pub fn grpo_surrogate(
    model: &LinearSoftmax,
    group: &RolloutGroup,
    p: &PolicyParams,
    cfg: &GrpoConfig,
) -> Result<SurrogateReport> {
    let objective = GrpoObjective::new(group, cfg)?;
    let new = model.batch_log_probs(p, &group.trajectories)?;
    let loss = objective.evaluate(&new)?.value;
    let (max_ratio, mean_ratio) = ratio_stats(objective.old, &new);
    Ok(SurrogateReport { loss, max_ratio, mean_ratio })
}

/// Max and mean importance ratio over all masked tokens (1 when empty).
pub fn ratio_stats(old: &[Vec<f64>], new: &[Vec<f64>]) -> (f64, f64) {
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (o, nw) in old.iter().zip(new) {
        for (a, b) in o.iter().zip(nw) {
            let r = (b - a).exp();
            max = max.max(r);
            sum += r;
            n += 1;
        }
    }
    if n == 0 {
        (1.0, 1.0)
    } else {
        (max, sum / n as f64)
    }
}
