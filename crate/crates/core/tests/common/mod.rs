#![allow(dead_code)]

use lldlab_core::grpo::{compute_advantages, GrpoConfig};
use lldlab_core::policy::{FeatureMap, LinearSoftmax, PolicyParams, SequenceLoss};
use lldlab_core::trajectory::{RolloutGroup, Segment, TerminalReason, Trajectory};
use lldlab_core::vocab::{TokenId, Vocab};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn small_model(vocab: usize, window: usize) -> LinearSoftmax {
    LinearSoftmax::new(Vocab::standard(vocab).unwrap(), FeatureMap { window, includes_turn_index: true, max_turns: 3 })
        .unwrap()
}

/// Random prompt/action/feedback trajectory over `vocab` tokens.
pub fn random_trajectory(rng: &mut ChaCha8Rng, vocab: usize, max_actions: usize) -> Trajectory {
    let tok = |rng: &mut ChaCha8Rng| rng.gen_range(0..vocab as TokenId);
    let mut segs = vec![Segment::prompt((0..rng.gen_range(1..=3)).map(|_| tok(rng)).collect())];
    let n_actions = rng.gen_range(1..=max_actions);
    for a in 0..n_actions {
        let len = rng.gen_range(1..=4);
        let mut seg = Segment::action((0..len).map(|_| tok(rng)).collect());
        if a + 1 == n_actions && rng.gen_bool(0.7) {
            let at = rng.gen_range(0..len);
            seg.answer_span = Some((at, at));
        }
        segs.push(seg);
        if a + 1 < n_actions {
            segs.push(Segment::feedback((0..rng.gen_range(1..=3)).map(|_| tok(rng)).collect()));
        }
    }
    let reason = if rng.gen_bool(0.5) { TerminalReason::Answered } else { TerminalReason::MaxTurns };
    Trajectory::new("q", segs, reason)
}

pub fn perturbed(p: &PolicyParams, scale: f64, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut q = p.clone();
    for w in &mut q.weights {
        *w += scale * (2.0 * rng.gen::<f64>() - 1.0);
    }
    q
}

/// Group with non-uniform binary rewards whose snapshot log-probs come
/// from `old`.
pub fn random_group(
    rng: &mut ChaCha8Rng,
    model: &LinearSoftmax,
    old: &PolicyParams,
    n: usize,
    max_actions: usize,
) -> RolloutGroup {
    let trajectories: Vec<Trajectory> =
        (0..n).map(|_| random_trajectory(rng, model.vocab_size(), max_actions)).collect();
    let mut rewards: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    if rewards.iter().all(|&r| r == rewards[0]) {
        rewards[0] = 1.0 - rewards[0];
    }
    group_from(model, old, trajectories, rewards)
}

pub fn group_from(
    model: &LinearSoftmax,
    old: &PolicyParams,
    trajectories: Vec<Trajectory>,
    rewards: Vec<f64>,
) -> RolloutGroup {
    let adv = compute_advantages(&rewards, &GrpoConfig::default());
    RolloutGroup {
        query_id: "q".into(),
        old_logprobs: Some(model.batch_log_probs(old, &trajectories).unwrap()),
        trajectories,
        rewards,
        advantages: adv.values,
        params_version: Some(old.version),
        degenerate: adv.degenerate,
    }
}

/// Central finite-difference gradient of `loss` at `p`.
pub fn finite_difference(
    model: &LinearSoftmax,
    p: &PolicyParams,
    trajectories: &[Trajectory],
    loss: &dyn SequenceLoss,
    h: f64,
) -> Vec<f64> {
    let eval = |q: &PolicyParams| loss.evaluate(&model.batch_log_probs(q, trajectories).unwrap()).unwrap().value;
    let mut q = p.clone();
    (0..p.weights.len())
        .map(|i| {
            let w = q.weights[i];
            q.weights[i] = w + h;
            let up = eval(&q);
            q.weights[i] = w - h;
            let down = eval(&q);
            q.weights[i] = w;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinate-wise relative error, with magnitudes floored at
/// `floor` so vanishing coordinates are compared absolutely.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Brute-force log-softmax from an explicitly built dense feature vector.
pub fn dense_log_prob(model: &LinearSoftmax, p: &PolicyParams, history: &[TokenId], turn: usize, y: TokenId) -> f64 {
    let phi = model.featurize(history, turn).unwrap();
    let logits: Vec<f64> = (0..p.rows).map(|v| (0..p.cols).map(|c| p.weights[v * p.cols + c] * phi[c]).sum()).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits[y as usize] - m - z.ln()
}

/// A finite-difference instance: snapshot `old`, evaluation point `new`,
/// and one group whose log-probs were recorded under `old`.
pub struct Instance {
    pub model: LinearSoftmax,
    pub old: PolicyParams,
    pub new: PolicyParams,
    pub group: RolloutGroup,
}

/// Distance from every non-smooth point of the surrogate, hinge and gates.
pub fn kink_margin(group: &RolloutGroup, new: &[Vec<f64>], eps: f64) -> f64 {
    let old = group.old_logprobs().unwrap();
    let mut margin = f64::INFINITY;
    for (i, (o_row, n_row)) in old.iter().zip(new).enumerate() {
        for (o, n) in o_row.iter().zip(n_row) {
            let r = (n - o).exp();
            margin = margin.min((n - o).abs()).min((r - 1.0 - eps).abs()).min((r - 1.0 + eps).abs());
        }
        let answer = group.trajectories[i].answer_mask();
        let full: f64 = o_row.iter().zip(n_row).map(|(o, n)| o - n).sum();
        let ma: f64 = o_row.iter().zip(n_row).zip(&answer).filter(|(_, &a)| !a).map(|((o, n), _)| o - n).sum();
        margin = margin.min(full.abs());
        if answer.contains(&false) {
            margin = margin.min(ma.abs());
        }
    }
    margin
}

/// Random kink-free instance with `|V| = 16` and at most four trajectories.
pub fn fd_instance(rng: &mut ChaCha8Rng) -> Instance {
    let eps = GrpoConfig::default().clip_eps;
    loop {
        let model = small_model(16, 2);
        let old = PolicyParams::random(model.vocab_size(), model.dim(), 0.5, rng);
        let n = rng.gen_range(2..=4);
        let group = random_group(rng, &model, &old, n, 3);
        let new = perturbed(&old, 0.15, rng);
        let lp = model.batch_log_probs(&new, &group.trajectories).unwrap();
        if kink_margin(&group, &lp, eps) > 1e-3 {
            return Instance { model, old, new, group };
        }
    }
}

/// A group whose incorrect responses repeat the correct response's prompt,
/// first action and feedback, then continue with the least likely tokens
/// under `p`. A few responses of either label take a different first action,
/// so the shared action's advantages do not cancel. Response 0 is correct
/// and takes the shared action.
pub fn adversarial_instance(rng: &mut ChaCha8Rng) -> (LinearSoftmax, PolicyParams, RolloutGroup) {
    let model = small_model(16, 2);
    let p = PolicyParams::random(model.vocab_size(), model.dim(), 1.0, rng);
    let tok = |rng: &mut ChaCha8Rng| rng.gen_range(0..16u32);
    let prompt: Vec<TokenId> = (0..2).map(|_| tok(rng)).collect();
    let shared: Vec<TokenId> = (0..rng.gen_range(1..=3)).map(|_| tok(rng)).collect();
    let feedback: Vec<TokenId> = (0..2).map(|_| tok(rng)).collect();

    // (correct, shares the first action)
    let mut kinds = vec![(true, true)];
    kinds.extend((0..rng.gen_range(0..=1)).map(|_| (true, true)));
    kinds.extend((0..rng.gen_range(1..=3)).map(|_| (false, true)));
    let others = rng.gen_range(1..=3);
    for _ in 0..others {
        kinds.push((rng.gen_bool(0.5), false));
    }

    let mut trajectories = Vec::new();
    let mut rewards = Vec::new();
    for (correct, shares) in kinds {
        let first = if shares {
            shared.clone()
        } else {
            let mut f: Vec<TokenId> = (0..shared.len()).map(|_| tok(rng)).collect();
            if f == shared {
                f[0] = (f[0] + 1) % 16;
            }
            f
        };
        let mut history = [prompt.clone(), first.clone(), feedback.clone()].concat();
        let mut second = Vec::new();
        for _ in 0..rng.gen_range(1..=3) {
            let y = if correct {
                tok(rng)
            } else {
                let d = model.distribution(&p, &history, 1).unwrap();
                (0..16u32).min_by(|&a, &b| d[a as usize].total_cmp(&d[b as usize])).unwrap()
            };
            second.push(y);
            history.push(y);
        }
        let segs = vec![
            Segment::prompt(prompt.clone()),
            Segment::action(first),
            Segment::feedback(feedback.clone()),
            Segment::action(second),
        ];
        trajectories.push(Trajectory::new("adv", segs, TerminalReason::Answered));
        rewards.push(if correct { 1.0 } else { 0.0 });
    }
    let group = group_from(&model, &p, trajectories, rewards);
    (model, p, group)
}
