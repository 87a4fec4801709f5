//! Likelihood-preserving regularizers.
//!
//! All three variants act on the preserving set (responses with `Â ≥ 0`)
//! and penalize per-token drops `max(0, lp_old − lp_new)` against the rollout
//! snapshot:
//!
//! * `Lld` sums every token drop.
//! * `Llds` gates each response on its signed total change: the response
//!   contributes only when `Σ (lp_old − lp_new) > 0`.
//! * `LldsMa` is `Llds` with the final answer span removed from both the
//!   gate sum and the penalized tokens.
//!
//! The normalizer is the number of masked tokens over the preserving set,
//! answer tokens included. Gates are constants under differentiation and the
//! hinge has subgradient zero at its kink.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::grpo::{check_alignment, GrpoConfig, GrpoObjective};
use crate::policy::{LinearSoftmax, LossValue, PolicyParams, SequenceLoss};
use crate::trajectory::{RolloutGroup, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegVariant {
    #[serde(rename = "lld")]
    Lld,
    #[serde(rename = "llds")]
    Llds,
    #[serde(rename = "llds-ma")]
    LldsMa,
}

impl RegVariant {
    fn gated(self) -> bool {
        !matches!(self, RegVariant::Lld)
    }

    fn masks_answer(self) -> bool {
        matches!(self, RegVariant::LldsMa)
    }
}

impl std::str::FromStr for RegVariant {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lld" => Ok(RegVariant::Lld),
            "llds" => Ok(RegVariant::Llds),
            "llds-ma" => Ok(RegVariant::LldsMa),
            other => Err(LabError::InvalidConfig(format!("unknown regularizer variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub variant: RegVariant,
    pub lambda: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig { variant: RegVariant::Llds, lambda: 0.1 }
    }
}

impl RegConfig {
    pub fn off() -> Self {
        RegConfig { variant: RegVariant::Llds, lambda: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(LabError::InvalidConfig(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenDrop {
    /// Masked-token index within the trajectory.
    pub index: usize,
    /// `max(0, lp_old − lp_new)`, in nats.
    pub drop: f64,
}

/// Responses protected by the regularizer: non-negative advantage.
pub fn preserving_set(group: &RolloutGroup) -> Vec<usize> {
    group.advantages.iter().enumerate().filter_map(|(i, &a)| (a >= 0.0).then_some(i)).collect()
}

/// Tokens whose likelihood fell, optionally skipping the final answer span.
pub fn token_drops(traj: &Trajectory, old: &[f64], new: &[f64], answer_masked: bool) -> Result<Vec<TokenDrop>> {
    let n = traj.masked_count();
    if old.len() != n {
        return Err(LabError::LogprobMisalign { expected: n, got: old.len() });
    }
    if new.len() != n {
        return Err(LabError::LogprobMisalign { expected: n, got: new.len() });
    }
    let answer = traj.answer_mask();
    Ok(old
        .iter()
        .zip(new)
        .enumerate()
        .filter(|(k, _)| !(answer_masked && answer[*k]))
        .filter(|(_, (o, nw))| o > nw)
        .map(|(k, (o, nw))| TokenDrop { index: k, drop: o - nw })
        .collect())
}

/// Regularizer of one group as a loss over new log-probabilities.
pub struct PenaltyObjective<'a> {
    group: &'a RolloutGroup,
    old: &'a [Vec<f64>],
    variant: RegVariant,
    preserving: Vec<usize>,
    answer_masks: Vec<Vec<bool>>,
}

impl<'a> PenaltyObjective<'a> {
    pub fn new(group: &'a RolloutGroup, variant: RegVariant) -> Result<Self> {
        let old = group.old_logprobs()?;
        let preserving = preserving_set(group);
        let answer_masks = group.trajectories.iter().map(Trajectory::answer_mask).collect();
        Ok(PenaltyObjective { group, old, variant, preserving, answer_masks })
    }

    /// Whether response `i`'s gate is open at `new`.
    pub fn gate(&self, i: usize, new: &[f64]) -> bool {
        if !self.variant.gated() {
            return true;
        }
        let signed: f64 = self.old[i]
            .iter()
            .zip(new)
            .enumerate()
            .filter(|(k, _)| !(self.variant.masks_answer() && self.answer_masks[i][*k]))
            .map(|(_, (o, n))| o - n)
            .sum();
        signed > 0.0
    }
}

impl SequenceLoss for PenaltyObjective<'_> {
    fn evaluate(&self, logprobs: &[Vec<f64>]) -> Result<LossValue> {
        check_alignment(self.old, logprobs)?;
        let mut dlogp: Vec<Vec<f64>> = logprobs.iter().map(|r| vec![0.0; r.len()]).collect();
        let denom: usize = self.preserving.iter().map(|&i| self.group.trajectories[i].masked_count()).sum();
        if denom == 0 {
            return Ok(LossValue { value: 0.0, dlogp });
        }
        let norm = 1.0 / denom as f64;
        let mut total = 0.0;
        for &i in &self.preserving {
            if !self.gate(i, &logprobs[i]) {
                continue;
            }
            for (k, (&o, &n)) in self.old[i].iter().zip(&logprobs[i]).enumerate() {
                if self.variant.masks_answer() && self.answer_masks[i][k] {
                    continue;
                }
                if o > n {
                    total += o - n;
                    dlogp[i][k] = -norm;
                }
            }
        }
        Ok(LossValue { value: norm * total, dlogp })
    }
}

/// `L_GRPO + λ · L_reg` for one group.
pub struct TotalObjective<'a> {
    grpo: GrpoObjective<'a>,
    penalty: PenaltyObjective<'a>,
    lambda: f64,
}

impl<'a> TotalObjective<'a> {
    pub fn new(group: &'a RolloutGroup, grpo: &GrpoConfig, reg: &RegConfig) -> Result<Self> {
        Ok(TotalObjective {
            grpo: GrpoObjective::new(group, grpo)?,
            penalty: PenaltyObjective::new(group, reg.variant)?,
            lambda: reg.lambda,
        })
    }
}

impl SequenceLoss for TotalObjective<'_> {
    fn evaluate(&self, logprobs: &[Vec<f64>]) -> Result<LossValue> {
        let mut out = self.grpo.evaluate(logprobs)?;
        if self.lambda == 0.0 {
            return Ok(out);
        }
        let reg = self.penalty.evaluate(logprobs)?;
        out.value += self.lambda * reg.value;
        for (row, reg_row) in out.dlogp.iter_mut().zip(&reg.dlogp) {
            for (d, r) in row.iter_mut().zip(reg_row) {
                *d += self.lambda * r;
            }
        }
        Ok(out)
    }
}

/// Regularizer value of `group` at `p`.
pub fn penalty(model: &LinearSoftmax, group: &RolloutGroup, p: &PolicyParams, cfg: &RegConfig) -> Result<f64> {
    let objective = PenaltyObjective::new(group, cfg.variant)?;
    let new = model.batch_log_probs(p, &group.trajectories)?;
    Ok(objective.evaluate(&new)?.value)
}

/// `L_total` of `group` at `p`.
pub fn total_loss(
    model: &LinearSoftmax,
    group: &RolloutGroup,
    p: &PolicyParams,
    grpo: &GrpoConfig,
    reg: &RegConfig,
) -> Result<f64> {
    let objective = TotalObjective::new(group, grpo, reg)?;
    let new = model.batch_log_probs(p, &group.trajectories)?;
    Ok(objective.evaluate(&new)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Segment, TerminalReason};

    fn answer_traj(n_prefix: usize) -> Trajectory {
        let mut toks: Vec<u32> = (0..n_prefix as u32).map(|i| 13 + i).collect();
        let span_at = toks.len() + 1;
        toks.extend([3, 20, 4]);
        let mut seg = Segment::action(toks);
        seg.answer_span = Some((span_at, span_at));
        Trajectory::new("q", vec![Segment::prompt(vec![13]), seg], TerminalReason::Answered)
    }

    fn group(trajs: Vec<Trajectory>, adv: Vec<f64>, old: Vec<Vec<f64>>) -> RolloutGroup {
        RolloutGroup {
            query_id: "q".into(),
            rewards: adv.iter().map(|&a| if a > 0.0 { 1.0 } else { 0.0 }).collect(),
            advantages: adv,
            trajectories: trajs,
            old_logprobs: Some(old),
            params_version: Some(0),
            degenerate: false,
        }
    }

    #[test]
    fn preserving_set_keeps_non_negative_advantages() {
        let mk = |adv: Vec<f64>| {
            let n = adv.len();
            group(vec![answer_traj(0); n], adv, vec![vec![0.0; 3]; n])
        };
        assert_eq!(preserving_set(&mk(vec![1.73, -0.58, -0.58, -0.58])), vec![0]);
        assert_eq!(preserving_set(&mk(vec![0.0; 4])), vec![0, 1, 2, 3]);
        assert_eq!(preserving_set(&mk(vec![1.0, -1.0])), vec![0]);
    }

    #[test]
    fn drops_are_elementwise_hinges() {
        let t = answer_traj(0); // masked: <answer>, f, </answer>
        assert!(token_drops(&t, &[-1.0, -2.0, -1.0], &[-1.0, -2.0, -1.0], false).unwrap().is_empty());
        let d = token_drops(&t, &[-1.0, -2.0, -0.5], &[-1.5, -1.0, -0.5], false).unwrap();
        assert_eq!(d, vec![TokenDrop { index: 0, drop: 0.5 }]);
        // the answer token is index 1
        let d = token_drops(&t, &[-1.0, -2.0, -0.5], &[-1.0, -2.5, -0.5], true).unwrap();
        assert!(d.is_empty());
        assert!(matches!(token_drops(&t, &[-1.0], &[-1.0, -2.0, -0.5], false), Err(LabError::LogprobMisalign { .. })));
    }

    #[test]
    fn net_improving_response_is_ungated_only_for_lld() {
        // one response, three tokens; token 0 drops 0.2, token 2 gains 0.5
        let g = group(vec![answer_traj(0)], vec![1.0], vec![vec![-1.0, -1.0, -1.0]]);
        let new = vec![vec![-1.2, -1.0, -0.5]];
        let lld = PenaltyObjective::new(&g, RegVariant::Lld).unwrap().evaluate(&new).unwrap();
        let llds = PenaltyObjective::new(&g, RegVariant::Llds).unwrap().evaluate(&new).unwrap();
        assert!((lld.value - 0.2 / 3.0).abs() < 1e-15);
        assert_eq!(llds.value, 0.0);
        assert!(llds.dlogp[0].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn answer_only_drop_is_exempt_under_ma() {
        let g = group(vec![answer_traj(0)], vec![1.0], vec![vec![-1.0, -1.0, -1.0]]);
        let new = vec![vec![-1.0, -1.4, -1.0]];
        let llds = PenaltyObjective::new(&g, RegVariant::Llds).unwrap().evaluate(&new).unwrap();
        let ma = PenaltyObjective::new(&g, RegVariant::LldsMa).unwrap().evaluate(&new).unwrap();
        assert!((llds.value - 0.4 / 3.0).abs() < 1e-15);
        assert_eq!(ma.value, 0.0);
    }

    #[test]
    fn zero_gate_sum_deactivates() {
        let g = group(vec![answer_traj(0)], vec![1.0], vec![vec![-1.0, -1.0, -1.0]]);
        let new = vec![vec![-1.25, -0.75, -1.0]];
        let llds = PenaltyObjective::new(&g, RegVariant::Llds).unwrap().evaluate(&new).unwrap();
        assert_eq!(llds.value, 0.0);
    }

    #[test]
    fn negative_advantage_responses_are_not_regularized() {
        let g = group(vec![answer_traj(0), answer_traj(1)], vec![1.0, -1.0], vec![vec![-1.0; 3], vec![-1.0; 4]]);
        let new = vec![vec![-1.0; 3], vec![-3.0; 4]];
        for v in [RegVariant::Lld, RegVariant::Llds, RegVariant::LldsMa] {
            assert_eq!(PenaltyObjective::new(&g, v).unwrap().evaluate(&new).unwrap().value, 0.0);
        }
    }

    #[test]
    fn variant_names() {
        assert_eq!("llds-ma".parse::<RegVariant>().unwrap(), RegVariant::LldsMa);
        assert_eq!(serde_json::to_string(&RegVariant::Lld).unwrap(), "\"lld\"");
        assert!("kl".parse::<RegVariant>().is_err());
    }
}
