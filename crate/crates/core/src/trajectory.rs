//! Trajectory data model: prompt, action and feedback segments over one flat
//! token axis, with the loss mask that separates trainable action tokens
//! from conditioning-only prompt and feedback tokens.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Prompt,
    Action,
    Feedback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub tokens: Vec<TokenId>,
    /// Inclusive `[lo, hi]` range of answer tokens inside an action segment.
    pub answer_span: Option<(usize, usize)>,
}

impl Segment {
    pub fn prompt(tokens: Vec<TokenId>) -> Self {
        Segment { kind: SegmentKind::Prompt, tokens, answer_span: None }
    }

    pub fn action(tokens: Vec<TokenId>) -> Self {
        Segment { kind: SegmentKind::Action, tokens, answer_span: None }
    }

    pub fn feedback(tokens: Vec<TokenId>) -> Self {
        Segment { kind: SegmentKind::Feedback, tokens, answer_span: None }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Answered,
    MaxTurns,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TrajectoryRecord", into = "TrajectoryRecord")]
pub struct Trajectory {
    pub query_id: String,
    pub segments: Vec<Segment>,
    pub loss_mask: Vec<bool>,
    pub turn_count: usize,
    pub terminal_reason: TerminalReason,
}

/// On-disk form; the mask and turn count are derived on load.
#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    query_id: String,
    segments: Vec<Segment>,
    terminal_reason: TerminalReason,
}

impl From<TrajectoryRecord> for Trajectory {
    fn from(r: TrajectoryRecord) -> Self {
        Trajectory::new(r.query_id, r.segments, r.terminal_reason)
    }
}

impl From<Trajectory> for TrajectoryRecord {
    fn from(t: Trajectory) -> Self {
        TrajectoryRecord { query_id: t.query_id, segments: t.segments, terminal_reason: t.terminal_reason }
    }
}

impl Trajectory {
    pub fn new(query_id: impl Into<String>, segments: Vec<Segment>, terminal_reason: TerminalReason) -> Self {
        let loss_mask =
            segments.iter().flat_map(|s| std::iter::repeat_n(s.kind == SegmentKind::Action, s.len())).collect();
        let turn_count = segments.iter().filter(|s| s.kind == SegmentKind::Action).count();
        Trajectory { query_id: query_id.into(), segments, loss_mask, turn_count, terminal_reason }
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The concatenated token axis.
    pub fn tokens(&self) -> Vec<TokenId> {
        self.segments.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    /// Flat range covered by each segment.
    pub fn segment_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.segments
            .iter()
            .map(|s| {
                let r = start..start + s.len();
                start = r.end;
                r
            })
            .collect()
    }

    /// Flat ranges of the action segments, in turn order.
    pub fn action_ranges(&self) -> Vec<Range<usize>> {
        self.segments
            .iter()
            .zip(self.segment_ranges())
            .filter(|(s, _)| s.kind == SegmentKind::Action)
            .map(|(_, r)| r)
            .collect()
    }

    pub fn actions(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Action)
    }

    pub fn feedbacks(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.kind == SegmentKind::Feedback)
    }

    /// Flat positions of the loss-masked tokens.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.loss_mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Turn index of every masked token, aligned with [`Self::masked_positions`].
    pub fn masked_turns(&self) -> Vec<usize> {
        self.action_ranges().iter().enumerate().flat_map(|(turn, r)| std::iter::repeat_n(turn, r.len())).collect()
    }

    /// Masked-token flags marking the final action's answer span.
    pub fn answer_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.masked_count()];
        let Some(last) = self.segments.iter().rposition(|s| s.kind == SegmentKind::Action) else {
            return mask;
        };
        let Some((lo, hi)) = self.segments[last].answer_span else {
            return mask;
        };
        let offset: usize =
            self.segments[..last].iter().filter(|s| s.kind == SegmentKind::Action).map(Segment::len).sum();
        let len = self.segments[last].len();
        for k in lo..=hi.min(len.saturating_sub(1)) {
            mask[offset + k] = true;
        }
        mask
    }

    /// Range of masked-token indices belonging to action `turn`.
    pub fn masked_range_of_action(&self, turn: usize) -> Option<Range<usize>> {
        let mut start = 0;
        for (t, seg) in self.actions().enumerate() {
            if t == turn {
                return Some(start..start + seg.len());
            }
            start += seg.len();
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MissingPrompt,
    ExtraPrompt { segment: usize },
    Alternation { segment: usize },
    MaskLength { expected: usize, got: usize },
    MaskOnPrompt { index: usize },
    MaskOnFeedback { index: usize },
    MaskOffAction { index: usize },
    SpanOnFeedback { segment: usize },
    SpanOnPrompt { segment: usize },
    SpanOutOfBounds { segment: usize },
    TurnCount { expected: usize, got: usize },
    TokenOutOfVocab { index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingPrompt => write!(f, "prompt-first"),
            Violation::ExtraPrompt { segment } => write!(f, "extra-prompt @ seg{segment}"),
            Violation::Alternation { segment } => write!(f, "alternation @ seg{segment}"),
            Violation::MaskLength { expected, got } => {
                write!(f, "mask-length: expected {expected}, got {got}")
            }
            Violation::MaskOnPrompt { index } => write!(f, "mask-on-prompt @ {index}"),
            Violation::MaskOnFeedback { index } => write!(f, "mask-on-feedback @ {index}"),
            Violation::MaskOffAction { index } => write!(f, "mask-off-action @ {index}"),
            Violation::SpanOnFeedback { .. } => write!(f, "span-on-feedback"),
            Violation::SpanOnPrompt { .. } => write!(f, "span-on-prompt"),
            Violation::SpanOutOfBounds { segment } => write!(f, "span-out-of-bounds @ seg{segment}"),
            Violation::TurnCount { expected, got } => {
                write!(f, "turn-count: expected {expected}, got {got}")
            }
            Violation::TokenOutOfVocab { index } => write!(f, "token-out-of-vocab @ {index}"),
        }
    }
}

/// Every broken trajectory invariant; empty when the trajectory is well formed.
pub fn validate_trajectory(t: &Trajectory, vocab: &Vocab) -> Vec<Violation> {
    let mut out = Vec::new();

    match t.segments.first() {
        Some(s) if s.kind == SegmentKind::Prompt => {}
        _ => out.push(Violation::MissingPrompt),
    }
    for (i, seg) in t.segments.iter().enumerate().skip(1) {
        let prev = t.segments[i - 1].kind;
        match seg.kind {
            SegmentKind::Prompt => out.push(Violation::ExtraPrompt { segment: i }),
            SegmentKind::Action if prev == SegmentKind::Action => out.push(Violation::Alternation { segment: i }),
            SegmentKind::Feedback if prev != SegmentKind::Action => out.push(Violation::Alternation { segment: i }),
            _ => {}
        }
    }
    if t.segments.len() > 1 {
        if let Some(last) = t.segments.last() {
            if last.kind != SegmentKind::Action {
                out.push(Violation::Alternation { segment: t.segments.len() - 1 });
            }
        }
    }

    let total = t.len();
    if t.loss_mask.len() != total {
        out.push(Violation::MaskLength { expected: total, got: t.loss_mask.len() });
    }
    for (seg_idx, (seg, range)) in t.segments.iter().zip(t.segment_ranges()).enumerate() {
        for idx in range {
            let Some(&m) = t.loss_mask.get(idx) else { break };
            match (seg.kind, m) {
                (SegmentKind::Prompt, true) => out.push(Violation::MaskOnPrompt { index: idx }),
                (SegmentKind::Feedback, true) => out.push(Violation::MaskOnFeedback { index: idx }),
                (SegmentKind::Action, false) => out.push(Violation::MaskOffAction { index: idx }),
                _ => {}
            }
        }
        if let Some((lo, hi)) = seg.answer_span {
            match seg.kind {
                SegmentKind::Feedback => out.push(Violation::SpanOnFeedback { segment: seg_idx }),
                SegmentKind::Prompt => out.push(Violation::SpanOnPrompt { segment: seg_idx }),
                SegmentKind::Action if lo > hi || hi >= seg.len() => {
                    out.push(Violation::SpanOutOfBounds { segment: seg_idx })
                }
                SegmentKind::Action => {}
            }
        }
    }

    let actions = t.actions().count();
    if t.turn_count != actions {
        out.push(Violation::TurnCount { expected: actions, got: t.turn_count });
    }
    for (idx, tok) in t.tokens().into_iter().enumerate() {
        if !vocab.contains(tok) {
            out.push(Violation::TokenOutOfVocab { index: idx });
        }
    }
    out
}

/// G rollouts for one query: the unit of one GRPO update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Per-trajectory log-probabilities of the masked tokens under the
    /// rollout snapshot.
    pub old_logprobs: Option<Vec<Vec<f64>>>,
    /// Version of the parameters that produced `old_logprobs`.
    pub params_version: Option<u64>,
    pub degenerate: bool,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Old log-probabilities, checked for presence and alignment.
    pub fn old_logprobs(&self) -> Result<&[Vec<f64>]> {
        let old = self
            .old_logprobs
            .as_deref()
            .ok_or_else(|| LabError::StaleGroup(format!("group {} has no old log-probs", self.query_id)))?;
        if old.len() != self.trajectories.len() {
            return Err(LabError::StaleGroup(format!(
                "group {} has {} old log-prob rows for {} trajectories",
                self.query_id,
                old.len(),
                self.trajectories.len()
            )));
        }
        for (row, t) in old.iter().zip(&self.trajectories) {
            if row.len() != t.masked_count() {
                return Err(LabError::LogprobMisalign { expected: t.masked_count(), got: row.len() });
            }
        }
        Ok(old)
    }

    pub fn total_masked(&self) -> usize {
        self.trajectories.iter().map(Trajectory::masked_count).sum()
    }

    pub fn correct_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.rewards[i] > 0.5).collect()
    }

    pub fn incorrect_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.rewards[i] <= 0.5).collect()
    }

    /// Checks the size and advantage-normalization invariants.
    pub fn check(&self) -> Result<()> {
        let g = self.trajectories.len();
        if self.rewards.len() != g || self.advantages.len() != g {
            return Err(LabError::InvalidTrajectory(format!(
                "group {}: {} trajectories, {} rewards, {} advantages",
                self.query_id,
                g,
                self.rewards.len(),
                self.advantages.len()
            )));
        }
        let uniform = self.rewards.windows(2).all(|w| w[0] == w[1]);
        let all_zero = self.advantages.iter().all(|&a| a == 0.0);
        if uniform != all_zero {
            return Err(LabError::InvalidTrajectory(format!(
                "group {}: advantages zero={all_zero} but rewards uniform={uniform}",
                self.query_id
            )));
        }
        Ok(())
    }
}
