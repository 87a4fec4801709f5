mod common;

use common::{dense_log_prob, fd_instance, finite_difference, max_relative_error, small_model};
use lldlab_core::grpo::{GrpoConfig, GrpoObjective};
use lldlab_core::lldreg::{PenaltyObjective, RegConfig, RegVariant, TotalObjective};
use lldlab_core::policy::{PolicyParams, SequenceLoss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-4;

fn check(name: &str, seed: u64, make: impl Fn(&lldlab_core::RolloutGroup) -> Box<dyn SequenceLoss + '_>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..20 {
        let inst = fd_instance(&mut rng);
        let loss = make(&inst.group);
        let (_, grad) = inst.model.loss_and_grad(&inst.new, &inst.group.trajectories, loss.as_ref()).unwrap();
        let fd = finite_difference(&inst.model, &inst.new, &inst.group.trajectories, loss.as_ref(), H);
        let err = max_relative_error(&grad.values, &fd, FLOOR);
        assert!(err < 1e-5, "{name}: relative error {err:e}");
    }
}

#[test]
fn surrogate_gradient() {
    check("grpo", 1, |g| Box::new(GrpoObjective::new(g, &GrpoConfig::default()).unwrap()));
}

#[test]
fn regularizer_gradients() {
    for (seed, v) in [(2, RegVariant::Lld), (3, RegVariant::Llds), (4, RegVariant::LldsMa)] {
        check(&format!("{v:?}"), seed, move |g| Box::new(PenaltyObjective::new(g, v).unwrap()));
    }
}

#[test]
fn total_gradient() {
    let reg = RegConfig { variant: RegVariant::LldsMa, lambda: 0.3 };
    check("total", 5, |g| Box::new(TotalObjective::new(g, &GrpoConfig::default(), &reg).unwrap()));
}

#[test]
fn entropy_gradient() {
    let model = small_model(16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let mut p = PolicyParams::random(model.vocab_size(), model.dim(), 1.0, &mut rng);
        let history: Vec<u32> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(0..16)).collect();
        let turn = rng.gen_range(0..3);
        let g = model.entropy_grad(&p, &history, turn).unwrap();
        for i in 0..p.weights.len() {
            let w = p.weights[i];
            p.weights[i] = w + H;
            let up = model.entropy(&p, &history, turn).unwrap();
            p.weights[i] = w - H;
            let down = model.entropy(&p, &history, turn).unwrap();
            p.weights[i] = w;
            let fd = (up - down) / (2.0 * H);
            let err = (fd - g.values[i]).abs() / fd.abs().max(g.values[i].abs()).max(FLOOR);
            assert!(err < 1e-5, "coordinate {i}: {} vs {fd}", g.values[i]);
        }
    }
}

#[test]
fn log_probs_match_dense_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for window in [1, 2, 5] {
        let model = small_model(16, window);
        let p = PolicyParams::random(model.vocab_size(), model.dim(), 1.0, &mut rng);
        let t = common::random_trajectory(&mut rng, 16, 3);
        let tokens = t.tokens();
        let lp = model.log_prob(&p, &t).unwrap();
        for (k, ctx) in model.token_contexts(&t).unwrap().iter().enumerate() {
            let dense = dense_log_prob(&model, &p, &tokens[..ctx.position], ctx.turn, ctx.target);
            assert!((dense - lp.per_token[k]).abs() < 1e-12);
        }
        assert!((lp.total - lp.per_token.iter().sum::<f64>()).abs() < 1e-12);
    }
}
