//! Linear-softmax autoregressive policy over one-hot window features.
//!
//! The logit of token `v` in a context is `W[v] · φ(context)`, where `φ`
//! concatenates one-hot blocks for the last `window` tokens (left-padded)
//! and, optionally, a one-hot block for the action's turn index. Because
//! `φ` is fixed, every log-likelihood gradient has the closed form
//! `∂ log π(y|c) / ∂W = (e_y − π(·|c)) ⊗ φ(c)`, which is what makes
//! finite-difference checks and exact hidden-state inner products possible.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::trajectory::{Segment, Trajectory};
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub window: usize,
    pub includes_turn_index: bool,
    #[serde(default = "default_max_turns")]
    pub max_turns: usize,
}

fn default_max_turns() -> usize {
    3
}

impl Default for FeatureMap {
    fn default() -> Self {
        FeatureMap { window: 5, includes_turn_index: true, max_turns: 3 }
    }
}

impl FeatureMap {
    pub fn dim(&self, vocab_size: usize) -> usize {
        self.window * vocab_size + if self.includes_turn_index { self.max_turns } else { 0 }
    }
}

/// Parameters of the policy; snapshots of this type serve as θ_old.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// Row-major `rows × cols` matrix, one row per vocabulary token.
    pub weights: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        PolicyParams { weights: vec![0.0; rows * cols], rows, cols, version: 0 }
    }

    pub fn random<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let weights = (0..rows * cols).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect();
        PolicyParams { weights, rows, cols, version: 0 }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.cols + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.weights[row * self.cols + col]
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// `W += scale · direction`; bumps the version.
    pub fn apply(&mut self, direction: &Gradient, scale: f64) -> Result<()> {
        if direction.values.len() != self.weights.len() {
            return Err(LabError::Shape(format!(
                "update has {} entries, params have {}",
                direction.values.len(),
                self.weights.len()
            )));
        }
        for (w, d) in self.weights.iter_mut().zip(&direction.values) {
            *w += scale * d;
        }
        self.version += 1;
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// Dense gradient with the same layout as [`PolicyParams::weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Gradient {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Gradient { values: vec![0.0; rows * cols], rows, cols }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|g| g.is_finite())
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Value of a scalar loss and its derivative with respect to every masked
/// token log-probability, `dlogp[i][k] = ∂L / ∂ log π(y_{i,k} | c_{i,k})`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub dlogp: Vec<Vec<f64>>,
}

/// A scalar loss that depends on the policy only through the masked-token
/// log-probabilities of a fixed list of trajectories.
pub trait SequenceLoss {
    fn evaluate(&self, logprobs: &[Vec<f64>]) -> Result<LossValue>;
}

/// Per-token log-probabilities of the masked tokens of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbs {
    pub per_token: Vec<f64>,
    pub total: f64,
}

/// Prediction context of one masked token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenContext {
    /// Flat position of the predicted token.
    pub position: usize,
    pub target: TokenId,
    pub turn: usize,
    /// Active feature columns (each with value 1).
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmax {
    pub vocab: Vocab,
    pub features: FeatureMap,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl LinearSoftmax {
    pub fn new(vocab: Vocab, features: FeatureMap) -> Result<Self> {
        if features.window == 0 {
            return Err(LabError::InvalidConfig("feature window must be at least 1".into()));
        }
        if features.includes_turn_index && features.max_turns == 0 {
            return Err(LabError::InvalidConfig("turn-index features need max_turns >= 1".into()));
        }
        Ok(LinearSoftmax { vocab, features })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn dim(&self) -> usize {
        self.features.dim(self.vocab.len())
    }

    pub fn zero_params(&self) -> PolicyParams {
        PolicyParams::zeros(self.vocab_size(), self.dim())
    }

    fn check_params(&self, p: &PolicyParams) -> Result<()> {
        if p.rows != self.vocab_size() || p.cols != self.dim() || p.weights.len() != p.rows * p.cols {
            return Err(LabError::Shape(format!(
                "params are {}x{}, model expects {}x{}",
                p.rows,
                p.cols,
                self.vocab_size(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Active feature columns for the next-token prediction after `history`.
    pub fn active_features(&self, history: &[TokenId], turn: usize) -> Result<Vec<usize>> {
        let v = self.vocab_size();
        let k = self.features.window;
        let pad = self.vocab.roles().pad;
        let mut active = Vec::with_capacity(k + 1);
        for slot in 0..k {
            let back = k - slot;
            let tok = if history.len() >= back { history[history.len() - back] } else { pad };
            if tok as usize >= v {
                return Err(LabError::TokenOutOfVocab { token: tok, size: v });
            }
            active.push(slot * v + tok as usize);
        }
        if self.features.includes_turn_index {
            active.push(k * v + turn.min(self.features.max_turns - 1));
        }
        Ok(active)
    }

    /// Dense feature vector; one-hot per window slot plus the turn block.
    pub fn featurize(&self, history: &[TokenId], turn: usize) -> Result<Vec<f64>> {
        let mut phi = vec![0.0; self.dim()];
        for c in self.active_features(history, turn)? {
            phi[c] = 1.0;
        }
        Ok(phi)
    }

    pub fn logits(&self, p: &PolicyParams, active: &[usize]) -> Vec<f64> {
        (0..p.rows)
            .map(|v| {
                let row = &p.weights[v * p.cols..(v + 1) * p.cols];
                active.iter().map(|&c| row[c]).sum()
            })
            .collect()
    }

    pub fn log_distribution(&self, p: &PolicyParams, history: &[TokenId], turn: usize) -> Result<Vec<f64>> {
        self.check_params(p)?;
        let active = self.active_features(history, turn)?;
        Ok(log_softmax(&self.logits(p, &active)))
    }

    pub fn distribution(&self, p: &PolicyParams, history: &[TokenId], turn: usize) -> Result<Vec<f64>> {
        Ok(self.log_distribution(p, history, turn)?.into_iter().map(f64::exp).collect())
    }

    /// Prediction contexts of every masked token; feedback and prompt
    /// tokens appear only inside the windows.
    pub fn token_contexts(&self, t: &Trajectory) -> Result<Vec<TokenContext>> {
        let tokens = t.tokens();
        let mut out = Vec::with_capacity(t.masked_count());
        for (turn, range) in t.action_ranges().into_iter().enumerate() {
            for pos in range {
                out.push(TokenContext {
                    position: pos,
                    target: tokens[pos],
                    turn,
                    active: self.active_features(&tokens[..pos], turn)?,
                });
            }
        }
        Ok(out)
    }

    pub fn log_prob(&self, p: &PolicyParams, t: &Trajectory) -> Result<LogProbs> {
        self.check_params(p)?;
        let mut per_token = Vec::with_capacity(t.masked_count());
        for ctx in self.token_contexts(t)? {
            let lp = log_softmax(&self.logits(p, &ctx.active));
            if ctx.target as usize >= lp.len() {
                return Err(LabError::TokenOutOfVocab { token: ctx.target, size: lp.len() });
            }
            per_token.push(lp[ctx.target as usize]);
        }
        let total = per_token.iter().sum();
        Ok(LogProbs { per_token, total })
    }

    /// Masked-token log-probabilities for a batch of trajectories.
    pub fn batch_log_probs(&self, p: &PolicyParams, ts: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
        ts.iter().map(|t| Ok(self.log_prob(p, t)?.per_token)).collect()
    }

    /// Shannon entropy (nats) of the next-token distribution.
    pub fn entropy(&self, p: &PolicyParams, history: &[TokenId], turn: usize) -> Result<f64> {
        let lp = self.log_distribution(p, history, turn)?;
        Ok(entropy_of(&lp))
    }

    /// Draws one action. `temperature == 0` decodes greedily, breaking ties
    /// toward the lowest id.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_action<R: Rng>(
        &self,
        p: &PolicyParams,
        history: &[TokenId],
        turn: usize,
        stops: &[TokenId],
        max_len: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Segment> {
        if max_len == 0 {
            return Err(LabError::InvalidConfig("max action length must be at least 1".into()));
        }
        self.check_params(p)?;
        let mut context = history.to_vec();
        let mut generated = Vec::new();
        while generated.len() < max_len {
            let active = self.active_features(&context, turn)?;
            let logits = self.logits(p, &active);
            let tok = if temperature <= 0.0 {
                argmax(&logits)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                sample_categorical(&log_softmax(&scaled), rng.gen::<f64>())
            };
            generated.push(tok);
            context.push(tok);
            if stops.contains(&tok) {
                break;
            }
        }
        Ok(Segment::action(generated))
    }

    /// Value and gradient of `loss` with respect to the weights.
    pub fn loss_and_grad(
        &self,
        p: &PolicyParams,
        trajectories: &[Trajectory],
        loss: &dyn SequenceLoss,
    ) -> Result<(f64, Gradient)> {
        self.check_params(p)?;
        let mut contexts = Vec::with_capacity(trajectories.len());
        let mut dists = Vec::with_capacity(trajectories.len());
        let mut logprobs = Vec::with_capacity(trajectories.len());
        for t in trajectories {
            let ctxs = self.token_contexts(t)?;
            let mut lps = Vec::with_capacity(ctxs.len());
            let mut ds = Vec::with_capacity(ctxs.len());
            for ctx in &ctxs {
                let lp = log_softmax(&self.logits(p, &ctx.active));
                lps.push(lp[ctx.target as usize]);
                ds.push(lp);
            }
            contexts.push(ctxs);
            dists.push(ds);
            logprobs.push(lps);
        }
        let LossValue { value, dlogp } = loss.evaluate(&logprobs)?;
        if !value.is_finite() {
            return Err(LabError::NumericOverflow { position: "loss value".into() });
        }
        if dlogp.len() != trajectories.len() {
            return Err(LabError::LogprobMisalign { expected: trajectories.len(), got: dlogp.len() });
        }
        let mut grad = Gradient::zeros(p.rows, p.cols);
        for (i, coeffs) in dlogp.iter().enumerate() {
            if coeffs.len() != contexts[i].len() {
                return Err(LabError::LogprobMisalign { expected: contexts[i].len(), got: coeffs.len() });
            }
            for (k, &c) in coeffs.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let ctx = &contexts[i][k];
                let lp = &dists[i][k];
                if !c.is_finite() || lp.iter().any(|x| x.is_nan()) {
                    return Err(LabError::NumericOverflow { position: format!("trajectory {i} masked token {k}") });
                }
                for (v, lpv) in lp.iter().enumerate() {
                    let err = if v == ctx.target as usize { 1.0 } else { 0.0 } - lpv.exp();
                    let row = &mut grad.values[v * p.cols..(v + 1) * p.cols];
                    for &col in &ctx.active {
                        row[col] += c * err;
                    }
                }
            }
        }
        if !grad.is_finite() {
            return Err(LabError::NumericOverflow { position: "gradient accumulation".into() });
        }
        Ok((value, grad))
    }

    /// Gradient of the next-token entropy, `∂H/∂z_v = −π_v (log π_v + H)`.
    pub fn entropy_grad(&self, p: &PolicyParams, history: &[TokenId], turn: usize) -> Result<Gradient> {
        self.check_params(p)?;
        let active = self.active_features(history, turn)?;
        let lp = log_softmax(&self.logits(p, &active));
        let h = entropy_of(&lp);
        let mut grad = Gradient::zeros(p.rows, p.cols);
        for (v, lpv) in lp.iter().enumerate() {
            let dz = -lpv.exp() * (lpv + h);
            for &col in &active {
                grad.values[v * p.cols + col] += dz;
            }
        }
        Ok(grad)
    }

    pub fn checkpoint(&self, p: &PolicyParams) -> Checkpoint {
        Checkpoint {
            vocab: self.vocab.clone(),
            feature_map: self.features,
            weights: p.weights.clone(),
            version: p.version,
        }
    }
}

pub fn entropy_of(logp: &[f64]) -> f64 {
    -logp.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { l.exp() * l }).sum::<f64>()
}

fn argmax(xs: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Inverse-CDF draw from log-probabilities with a uniform `u ∈ [0, 1)`.
fn sample_categorical(logp: &[f64], u: f64) -> TokenId {
    let mut acc = 0.0;
    for (i, l) in logp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i as TokenId;
        }
    }
    // u landed in the rounding gap above the accumulated mass
    logp.iter().rposition(|l| *l > f64::NEG_INFINITY).unwrap_or(logp.len() - 1) as TokenId
}

/// Checkpoint file: vocabulary, feature layout and row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub feature_map: FeatureMap,
    pub weights: Vec<f64>,
    pub version: u64,
}

impl Checkpoint {
    pub fn into_parts(self) -> Result<(LinearSoftmax, PolicyParams)> {
        let model = LinearSoftmax::new(self.vocab, self.feature_map)?;
        let (rows, cols) = (model.vocab_size(), model.dim());
        if self.weights.len() != rows * cols {
            return Err(LabError::Shape(format!(
                "checkpoint has {} weights, expected {rows}x{cols}",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(LabError::NumericOverflow { position: "checkpoint weights".into() });
        }
        let params = PolicyParams { weights: self.weights, rows, cols, version: self.version };
        Ok((model, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Segment, TerminalReason};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(v: usize, k: usize) -> LinearSoftmax {
        LinearSoftmax::new(
            Vocab::standard(v).unwrap(),
            FeatureMap { window: k, includes_turn_index: true, max_turns: 3 },
        )
        .unwrap()
    }

    #[test]
    fn empty_context_pads_every_slot() {
        let m = model(16, 2);
        let phi = m.featurize(&[], 0).unwrap();
        assert_eq!(phi.len(), 2 * 16 + 3);
        let fm = FeatureMap { window: 2, includes_turn_index: false, max_turns: 3 };
        let m2 = LinearSoftmax::new(Vocab::standard(16).unwrap(), fm).unwrap();
        let phi = m2.featurize(&[], 0).unwrap();
        let norm = phi.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(phi[0], 1.0);
        assert_eq!(phi[16], 1.0);
    }

    #[test]
    fn window_is_concatenated_one_hots() {
        let fm = FeatureMap { window: 2, includes_turn_index: false, max_turns: 3 };
        let m = LinearSoftmax::new(Vocab::standard(16).unwrap(), fm).unwrap();
        let phi = m.featurize(&[14, 15], 0).unwrap();
        let mut expected = vec![0.0; 32];
        expected[14] = 1.0;
        expected[16 + 15] = 1.0;
        assert_eq!(phi, expected);
        assert_eq!(phi, m.featurize(&[14, 15], 0).unwrap());
        assert!(matches!(m.featurize(&[16], 0), Err(LabError::TokenOutOfVocab { .. })));
    }

    #[test]
    fn zero_weights_give_uniform_log_prob_and_max_entropy() {
        let m = model(16, 2);
        let p = m.zero_params();
        let t =
            Trajectory::new("q", vec![Segment::prompt(vec![13]), Segment::action(vec![14])], TerminalReason::MaxTurns);
        let lp = m.log_prob(&p, &t).unwrap();
        assert_eq!(lp.per_token.len(), 1);
        assert!((lp.total - (1.0f64 / 16.0).ln()).abs() < 1e-14);
        assert!((m.entropy(&p, &[13], 0).unwrap() - 16f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn no_masked_tokens_means_empty_sum() {
        let m = model(16, 2);
        let t = Trajectory::new("q", vec![Segment::prompt(vec![13, 14])], TerminalReason::MaxTurns);
        let lp = m.log_prob(&m.zero_params(), &t).unwrap();
        assert!(lp.per_token.is_empty());
        assert_eq!(lp.total, 0.0);
    }

    #[test]
    fn dominant_logit_collapses_entropy_and_sampling() {
        let m = model(16, 2);
        let mut p = m.zero_params();
        let close = m.vocab.roles().answer_close as usize;
        let turn_col = 2 * 16;
        *p.get_mut(close, turn_col) = 100.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seg = m.sample_action(&p, &[13], 0, &m.vocab.roles().stop_tokens(), 4, 1.0, &mut rng).unwrap();
        assert_eq!(seg.tokens, vec![close as TokenId]);

        *p.get_mut(close, turn_col) = 1e6;
        assert!(m.entropy(&p, &[13], 0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let m = model(16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = PolicyParams::random(m.vocab_size(), m.dim(), 1.0, &mut rng);
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            m.sample_action(&p, &[13, 14], 1, &[2, 4, 7], 6, 1.0, &mut r).unwrap()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn low_temperature_matches_greedy_decoder() {
        let m = model(16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = PolicyParams::random(m.vocab_size(), m.dim(), 2.0, &mut rng);
        let stops = m.vocab.roles().stop_tokens();
        // explicit greedy decoder
        let mut ctx = vec![13];
        let mut greedy = Vec::new();
        for _ in 0..5 {
            let lp = m.log_distribution(&p, &ctx, 0).unwrap();
            let mut best = 0;
            for v in 1..lp.len() {
                if lp[v] > lp[best] {
                    best = v;
                }
            }
            greedy.push(best as TokenId);
            ctx.push(best as TokenId);
            if stops.contains(&(best as TokenId)) {
                break;
            }
        }
        let cold = m.sample_action(&p, &[13], 0, &stops, 5, 1e-4, &mut rng).unwrap();
        let zero = m.sample_action(&p, &[13], 0, &stops, 5, 0.0, &mut rng).unwrap();
        assert_eq!(cold.tokens, greedy);
        assert_eq!(zero.tokens, greedy);
    }

    #[test]
    fn greedy_ties_break_to_lowest_id() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = PolicyParams::random(m.vocab_size(), m.dim(), 1.0, &mut rng);
        p.version = 7;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        m.checkpoint(&p).save(&path).unwrap();
        let (m2, p2) = Checkpoint::load(&path).unwrap().into_parts().unwrap();
        assert_eq!(m2, m);
        assert_eq!(p2, p);
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(v["feature_map"]["window"], 2);
        assert_eq!(v["weights"].as_array().unwrap().len(), 16 * m.dim());
    }

    #[test]
    fn updates_bump_version() {
        let m = model(16, 2);
        let mut p = m.zero_params();
        let g = Gradient::zeros(p.rows, p.cols);
        p.apply(&g, 0.0).unwrap();
        p.apply(&g, 1.0).unwrap();
        assert_eq!(p.version, 2);
    }
}
