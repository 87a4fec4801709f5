mod common;

use common::{group_from, perturbed, random_group, random_trajectory, small_model};
use lldlab_core::diagnostics::{lld_record, probe_delta_x, ProbeUpdate};
use lldlab_core::grpo::{clipped_term, compute_advantages, GrpoConfig, GrpoObjective};
use lldlab_core::lldreg::{PenaltyObjective, RegConfig, RegVariant};
use lldlab_core::policy::{Checkpoint, PolicyParams, SequenceLoss};
use lldlab_core::trajectory::{SegmentKind, Trajectory};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distributions_are_normalized(seed in any::<u64>(), scale in 0.0f64..20.0, len in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = small_model(16, 3);
        let p = PolicyParams::random(model.vocab_size(), model.dim(), scale, &mut rng);
        let history: Vec<u32> = (0..len).map(|_| rng.gen_range(0..16)).collect();
        let d = model.distribution(&p, &history, rng.gen_range(0..3)).unwrap();
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(d.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn clipped_term_is_pessimistic(ratio in 0.01f64..5.0, adv in -3.0f64..3.0, eps in 0.01f64..0.5) {
        let (v, d) = clipped_term(ratio, adv, eps);
        let expected = (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv);
        prop_assert!((v - expected).abs() <= 1e-15 * expected.abs().max(1.0));
        prop_assert!(d == 0.0 || d == ratio * adv);
        if ratio > 1.0 - eps && ratio < 1.0 + eps {
            prop_assert_eq!(d, ratio * adv);
        }
        if (adv > 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps) {
            prop_assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(0u8..=1, 2..12)) {
        let r: Vec<f64> = rewards.iter().map(|&x| f64::from(x)).collect();
        let adv = compute_advantages(&r, &GrpoConfig::default());
        let uniform = r.iter().all(|&x| x == r[0]);
        prop_assert_eq!(adv.degenerate, uniform);
        if !uniform {
            let n = r.len() as f64;
            let mean = adv.values.iter().sum::<f64>() / n;
            let var = adv.values.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn action_deltas_telescope(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = small_model(16, 2);
        let old = PolicyParams::random(model.vocab_size(), model.dim(), 1.0, &mut rng);
        let fin = perturbed(&old, 0.5, &mut rng);
        let t = random_trajectory(&mut rng, 16, 4);
        let rec = lld_record(&model, &old, &fin, &t, 0.0).unwrap();
        let total = model.log_prob(&fin, &t).unwrap().total - model.log_prob(&old, &t).unwrap().total;
        prop_assert_eq!(rec.action_deltas.len(), t.turn_count);
        prop_assert!((rec.action_deltas.iter().sum::<f64>() - total).abs() < 1e-9);
        prop_assert_eq!(rec.lld_flag, rec.response_delta <= 0.0);
    }

    #[test]
    fn feedback_is_context_not_target(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = small_model(16, 2);
        let p = PolicyParams::random(model.vocab_size(), model.dim(), 1.0, &mut rng);
        let mut t = random_trajectory(&mut rng, 16, 3);
        let masked: usize = t.segments.iter().filter(|s| s.kind == SegmentKind::Action).map(|s| s.len()).sum();
        let lp = model.log_prob(&p, &t).unwrap();
        prop_assert_eq!(lp.per_token.len(), masked);
        let Some(fb) = t.segments.iter().position(|s| s.kind == SegmentKind::Feedback) else {
            return Ok(());
        };
        let before: usize = t.segments[..fb].iter().filter(|s| s.kind == SegmentKind::Action).map(|s| s.len()).sum();
        let last = t.segments[fb].tokens.len() - 1;
        let tok = t.segments[fb].tokens[last];
        t.segments[fb].tokens[last] = (tok + 1) % 16;
        let t = Trajectory::new(t.query_id.clone(), t.segments.clone(), t.terminal_reason);
        let flipped = model.log_prob(&p, &t).unwrap();
        prop_assert_eq!(&flipped.per_token[..before], &lp.per_token[..before]);
        prop_assert!(flipped.per_token[before] != lp.per_token[before]);
    }

    #[test]
    fn penalties_are_ordered_and_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = small_model(16, 2);
        let old = PolicyParams::random(model.vocab_size(), model.dim(), 1.0, &mut rng);
        let group = random_group(&mut rng, &model, &old, 4, 3);
        let new = model.batch_log_probs(&perturbed(&old, 0.5, &mut rng), &group.trajectories).unwrap();
        let value = |v| PenaltyObjective::new(&group, v).unwrap().evaluate(&new).unwrap().value;
        let (lld, llds, ma) = (value(RegVariant::Lld), value(RegVariant::Llds), value(RegVariant::LldsMa));
        prop_assert!(lld >= 0.0 && llds >= 0.0 && ma >= 0.0);
        prop_assert!(llds <= lld);
        let grpo = GrpoObjective::new(&group, &GrpoConfig::default()).unwrap().evaluate(&new).unwrap();
        for (row, t) in grpo.dlogp.iter().zip(&group.trajectories) {
            prop_assert_eq!(row.len(), t.masked_count());
        }
    }

    #[test]
    fn probe_leaves_parameters_untouched(seed in any::<u64>(), lr in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = small_model(16, 2);
        let theta = PolicyParams::random(model.vocab_size(), model.dim(), 1.0, &mut rng);
        let group = random_group(&mut rng, &model, &theta, 4, 2);
        let before = theta.clone();
        let update = ProbeUpdate { learning_rate: lr, grpo: GrpoConfig::default(), reg: RegConfig::default() };
        let a = probe_delta_x(&model, &theta, &group, &update).unwrap();
        let b = probe_delta_x(&model, &theta, &group, &update).unwrap();
        prop_assert_eq!(&theta, &before);
        prop_assert_eq!(a.delta_x.to_bits(), b.delta_x.to_bits());
        prop_assert_eq!(a.n_correct + a.n_incorrect, 4);
    }

    #[test]
    fn checkpoints_and_groups_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = small_model(16, 2);
        let mut p = PolicyParams::random(model.vocab_size(), model.dim(), 3.0, &mut rng);
        p.version = rng.gen();
        let ck = model.checkpoint(&p);
        let back: Checkpoint = serde_json::from_str(&serde_json::to_string(&ck).unwrap()).unwrap();
        prop_assert_eq!(&back, &ck);
        let (m2, p2) = back.into_parts().unwrap();
        prop_assert_eq!(m2.features, model.features);
        prop_assert_eq!(p2, p);
        let trajs: Vec<Trajectory> = (0..3).map(|_| random_trajectory(&mut rng, 16, 3)).collect();
        let group = group_from(&model, &ck.clone().into_parts().unwrap().1, trajs, vec![1.0, 0.0, 0.0]);
        let g2: lldlab_core::RolloutGroup = serde_json::from_str(&serde_json::to_string(&group).unwrap()).unwrap();
        prop_assert_eq!(g2, group);
    }
}

/// Sharpening a distribution lowers its entropy and raises the likelihood
/// of its mode.
#[test]
fn entropy_falls_as_the_mode_sharpens() {
    let model = small_model(16, 1);
    let history = [14u32];
    let mut p = model.zero_params();
    let col = model.active_features(&history, 0).unwrap()[0];
    let mut last = (f64::INFINITY, f64::NEG_INFINITY);
    for step in 0..10 {
        *p.get_mut(15, col) = step as f64 * 0.7;
        let h = model.entropy(&p, &history, 0).unwrap();
        let lp = model.log_distribution(&p, &history, 0).unwrap()[15];
        assert!(h < last.0 || step == 0);
        assert!(lp > last.1);
        last = (h, lp);
    }
    assert!((model.entropy(&model.zero_params(), &history, 0).unwrap() - 16f64.ln()).abs() < 1e-12);
}

/// From a moved iterate, one small step on the regularized loss lowers the
/// signed likelihood decrease of the preserving responses relative to the
/// unregularized step.
#[test]
fn regularized_step_damps_signed_decrease() {
    use lldlab_core::lldreg::{preserving_set, TotalObjective};
    let model = small_model(16, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let grpo = GrpoConfig::default();
    let mut damped = 0;
    for _ in 0..100 {
        let old = PolicyParams::random(model.vocab_size(), model.dim(), 1.0, &mut rng);
        let group = random_group(&mut rng, &model, &old, 4, 3);
        let theta = perturbed(&old, 0.3, &mut rng);
        let signed = |reg: &RegConfig| {
            let objective = TotalObjective::new(&group, &grpo, reg).unwrap();
            let (_, grad) = model.loss_and_grad(&theta, &group.trajectories, &objective).unwrap();
            let mut q = theta.clone();
            q.apply(&grad, -1e-3).unwrap();
            let old_lp = group.old_logprobs().unwrap();
            let new_lp = model.batch_log_probs(&q, &group.trajectories).unwrap();
            preserving_set(&group)
                .into_iter()
                .map(|i| old_lp[i].iter().zip(&new_lp[i]).map(|(o, n)| o - n).sum::<f64>())
                .sum::<f64>()
        };
        let plain = signed(&RegConfig::off());
        let reg = signed(&RegConfig { variant: RegVariant::Lld, lambda: 1.0 });
        damped += usize::from(reg <= plain + 1e-12);
    }
    assert_eq!(damped, 100);
}
