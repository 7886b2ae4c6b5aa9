use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::envgen::ScenarioConfig;
use crate::episode::{EpisodeConfig, EpisodeParams};
use crate::error::Error;
use crate::grid::GridDims;
use crate::primitives::{GraphParams, PrimitiveGraph};
use crate::sensor::SensorModel;

fn graph() -> Arc<PrimitiveGraph> {
    static G: OnceLock<Arc<PrimitiveGraph>> = OnceLock::new();
    G.get_or_init(|| Arc::new(PrimitiveGraph::generate(&GraphParams::default()).unwrap()))
        .clone()
}

fn small_setup() -> (EpisodeConfig, ScenarioConfig) {
    let sc = ScenarioConfig {
        width: 12,
        height: 12,
        k_range: (1, 2),
        var_range: (2.0, 8.0),
        n_targets: (2, 3),
        ..ScenarioConfig::default()
    };
    let params = EpisodeParams {
        budget: 300.0,
        obs_window: 5,
        obs_scales: vec![1, 2],
        ..EpisodeParams::default()
    };
    let cfg = EpisodeConfig::new(
        GridDims::new(12, 12, 1.0).unwrap(),
        SensorModel::default(),
        graph(),
        params,
    )
    .unwrap();
    (cfg, sc)
}

#[test]
fn zero_net_outputs_zero() {
    let net = ActorCriticNet::zeros(6, &[4, 3], 5).unwrap();
    let out = net.forward(&[0.3, -1.0, 2.0, 0.0, 0.1, 0.5]).unwrap();
    assert_eq!(out.logits, vec![0.0; 5]);
    assert_eq!(out.value, 0.0);
    assert!(net.forward(&[0.0; 5]).is_err());
}

#[test]
fn forward_is_deterministic_and_lipschitz() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Mlp::init(&[10, 16, 16, 4], false, 1.0, &mut rng).unwrap();
    let l = m.lipschitz_bound();
    for _ in 0..50 {
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dir: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + 1e-7 * d / norm).collect();
        let y = m.forward(&x).unwrap();
        assert_eq!(y, m.forward(&x).unwrap());
        let yp = m.forward(&xp).unwrap();
        let change = y
            .iter()
            .zip(&yp)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(change <= l * 1e-7 * (1.0 + 1e-6), "{change} vs {}", l * 1e-7);
    }
}

#[test]
fn masked_policy_examples() {
    let p = masked_policy(&[3.0, 1.0, -2.0], &[false, true, false]).unwrap();
    assert_eq!(p, vec![0.0, 1.0, 0.0]);
    let p = masked_policy(&[0.7; 4], &[true, false, true, true]).unwrap();
    for (i, v) in p.iter().enumerate() {
        let expected = if i == 1 { 0.0 } else { 1.0 / 3.0 };
        assert!((v - expected).abs() < 1e-15);
    }
    let p = masked_policy(&[2.0, 1.0, 0.0], &[true; 3]).unwrap();
    let z = 2f64.exp() + 1f64.exp() + 1.0;
    let oracle = [2f64.exp() / z, 1f64.exp() / z, 1.0 / z];
    for (a, b) in p.iter().zip(oracle) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!((p[0] - 0.6652).abs() < 1e-4 && (p[2] - 0.0900).abs() < 1e-4);
    assert!(matches!(
        masked_policy(&[1.0, 2.0], &[false, false]),
        Err(Error::NoValidAction)
    ));
}

#[test]
fn masked_policy_sums_to_one_and_samples_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let n = rng.random_range(1..25);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let k = rng.random_range(0..n);
        mask[k] = true;
        let p = masked_policy(&logits, &mask).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (pi, &m) in p.iter().zip(&mask) {
            if !m {
                assert_eq!(*pi, 0.0);
            }
        }
        for _ in 0..20 {
            assert!(mask[sample_index(&p, &mut rng)]);
        }
    }
}

#[test]
fn lambda_return_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 9;
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d = vec![false; n];
    let (g, boot) = (0.97, 0.4);
    let td = lambda_returns(&r, &v, &d, boot, g, 0.0).unwrap();
    for t in 0..n {
        let next = if t + 1 < n { v[t + 1] } else { boot };
        assert!((td[t] - (r[t] + g * next)).abs() < 1e-12);
    }
    let mc = lambda_returns(&r, &v, &d, boot, g, 1.0).unwrap();
    for t in 0..n {
        let mut expected = g.powi((n - t) as i32) * boot;
        for k in t..n {
            expected += g.powi((k - t) as i32) * r[k];
        }
        assert!((mc[t] - expected).abs() < 1e-12);
    }
}

#[test]
fn lambda_return_hand_case() {
    let g = lambda_returns(&[1.0, 1.0], &[0.5, 0.5], &[false, false], 0.7, 0.99, 0.8).unwrap();
    assert!((g[1] - 1.693).abs() < 1e-12);
    // mixture of the one-step and two-step returns
    let one = 1.0 + 0.99 * 0.5;
    let two = 1.0 + 0.99 * 1.0 + 0.99 * 0.99 * 0.7;
    let mixture = 0.2 * one + 0.8 * two;
    assert!((g[0] - mixture).abs() < 1e-12);
    assert!((g[0] - 2.439856).abs() < 1e-9);
}

#[test]
fn done_flag_cuts_the_bootstrap() {
    let g = lambda_returns(&[1.0, 2.0], &[0.0, 0.0], &[false, true], 10.0, 0.9, 0.5).unwrap();
    assert_eq!(g[1], 2.0);
    let a = gae(&[1.0, 2.0], &[0.0, 0.0], &[true, false], 10.0, 0.9, 0.5).unwrap();
    assert_eq!(a[0], 1.0);
}

#[test]
fn gae_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let n = 10;
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let boot = rng.random_range(-2.0..2.0);
        let (g, l) = (rng.random_range(0.8..1.0), rng.random_range(0.0..1.0));
        let d = vec![false; n];
        let a = gae(&r, &v, &d, boot, g, l).unwrap();
        let vn = |t: usize| if t < n { v[t] } else { boot };
        for t in 0..n {
            let mut direct = 0.0;
            for k in 0..n - t {
                let delta = r[t + k] + g * vn(t + k + 1) - v[t + k];
                direct += (g * l).powi(k as i32) * delta;
            }
            assert!((a[t] - direct).abs() < 1e-10);
        }
        let a0 = gae(&r, &v, &d, boot, g, 0.0).unwrap();
        for t in 0..n {
            assert!((a0[t] - (r[t] + g * vn(t + 1) - v[t])).abs() < 1e-12);
        }
    }
    let a = gae(&[1.0, 2.0, 3.0], &[0.5, 0.1, 0.2], &[false; 3], 0.0, 1.0, 1.0).unwrap();
    assert!((a[0] - (6.0 - 0.5)).abs() < 1e-12);
}

fn random_batch(net: &ActorCriticNet, n: usize, rng: &mut ChaCha8Rng) -> Batch {
    let a = net.action_count();
    let mut b = Batch::default();
    for _ in 0..n {
        b.features
            .push((0..net.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut mask: Vec<bool> = (0..a).map(|_| rng.random_bool(0.6)).collect();
        let k = rng.random_range(0..a);
        mask[k] = true;
        let valid: Vec<usize> = (0..a).filter(|&i| mask[i]).collect();
        b.actions.push(valid[rng.random_range(0..valid.len())]);
        b.masks.push(mask);
        b.returns.push(rng.random_range(-2.0..2.0));
        b.advantages.push(rng.random_range(-2.0..2.0));
    }
    b
}

#[test]
fn loss_examples() {
    let net = ActorCriticNet::zeros(3, &[4], 2).unwrap();
    let cfg = LossConfig::default();
    let batch = Batch {
        features: vec![vec![0.1, 0.2, 0.3]],
        actions: vec![1],
        masks: vec![vec![true, true]],
        returns: vec![0.0],
        advantages: vec![2.0],
    };
    let l = losses(&net, &batch, &cfg).unwrap();
    assert_eq!(l.critic, 0.0);
    assert!((l.actor - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    assert!((l.actor + 1.3863).abs() < 1e-4);
    assert!((l.entropy - 2f64.ln()).abs() < 1e-12);
    let single = Batch {
        masks: vec![vec![false, true]],
        ..batch.clone()
    };
    assert_eq!(losses(&net, &single, &cfg).unwrap().entropy, 0.0);
    let expected_policy = -cfg.alpha1 * l.entropy - cfg.alpha2 * l.actor + l.valid;
    assert!((l.policy - expected_policy).abs() < 1e-12);
    // zero valid logits: every term is ln 2 times its weight
    assert!((l.valid - 2.0 * cfg.beta2 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = ActorCriticNet::init(7, &[8, 8], 4, &mut rng).unwrap();
    // bigger head weights make every loss term contribute visibly
    let mut net = net;
    let mut flat = net.flat();
    for v in flat.iter_mut() {
        *v *= 1.5;
    }
    net.set_flat(&flat).unwrap();
    let batch = random_batch(&net, 6, &mut rng);
    let cfg = LossConfig {
        alpha1: 0.3,
        ..LossConfig::default()
    };
    let (_, grad) = loss_and_grad(&net, &batch, &cfg).unwrap();
    let objective = |p: &[f64]| {
        let mut n = net.clone();
        n.set_flat(p).unwrap();
        losses(&n, &batch, &cfg).unwrap().objective(&cfg)
    };
    let base = net.flat();
    assert!(base.len() >= 200);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let i = rng.random_range(0..base.len());
        let h = 1e-5;
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
        let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn gradient_is_linear_in_loss_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = ActorCriticNet::init(5, &[6], 3, &mut rng).unwrap();
    let batch = random_batch(&net, 4, &mut rng);
    let at = |alpha1: f64| {
        let cfg = LossConfig {
            alpha1,
            ..LossConfig::default()
        };
        loss_and_grad(&net, &batch, &cfg).unwrap().1
    };
    let (g0, g1, g2) = (at(0.0), at(0.2), at(0.4));
    for i in 0..g0.len() {
        let d1 = g1[i] - g0[i];
        let d2 = g2[i] - g0[i];
        assert!((d2 - 2.0 * d1).abs() <= 1e-12 * (1.0 + d2.abs()));
    }
}

#[test]
fn zero_loss_batch_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let net = ActorCriticNet::init(5, &[6], 3, &mut rng).unwrap();
    let mut batch = random_batch(&net, 3, &mut rng);
    for t in 0..3 {
        batch.returns[t] = net.forward(&batch.features[t]).unwrap().value;
    }
    let cfg = LossConfig {
        alpha1: 0.0,
        alpha2: 0.0,
        beta1: 0.0,
        beta2: 0.0,
        ..LossConfig::default()
    };
    let (l, g) = loss_and_grad(&net, &batch, &cfg).unwrap();
    assert_eq!(l.critic, 0.0);
    assert!(g.iter().all(|&v| v == 0.0));
    let (_, g) = loss_and_grad(&net, &Batch::default(), &LossConfig::default()).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let net = ActorCriticNet::init(9, &[7, 5], 4, &mut rng).unwrap();
    let mut bytes = Vec::new();
    net.write_checkpoint(&mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"IPPN");
    let back = ActorCriticNet::read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(back, net);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(ActorCriticNet::read_checkpoint(bad.as_slice()).is_err());
    assert!(ActorCriticNet::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    bytes.push(0);
    assert!(ActorCriticNet::read_checkpoint(bytes.as_slice()).is_err());
}

#[test]
fn zero_rounds_leave_parameters_alone() {
    let (cfg, sc) = small_setup();
    let tc = TrainConfig {
        workers: 1,
        total_steps: 0,
        hidden: vec![8],
        ..TrainConfig::default()
    };
    let out = train(&tc, &cfg, &sc).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let fresh =
        ActorCriticNet::init(cfg.feature_len(), &[8], cfg.max_out_degree(), &mut rng).unwrap();
    assert_eq!(out.net, fresh);
    assert!(out.curve.is_empty());
}

#[test]
fn training_is_deterministic() {
    let (cfg, sc) = small_setup();
    let tc = TrainConfig {
        workers: 2,
        rollout_length: 8,
        total_steps: 160,
        hidden: vec![16],
        learning_rate: 1e-2,
        seed: 5,
        ..TrainConfig::default()
    };
    let a = train(&tc, &cfg, &sc).unwrap();
    let b = train(&tc, &cfg, &sc).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.net, b.net);
    assert_eq!(a.curve.len(), 10);
    assert_eq!(a.sampled_actions, 160);
    assert_ne!(a.net, train(&TrainConfig { seed: 6, ..tc.clone() }, &cfg, &sc).unwrap().net);
    let csv = curve_csv(&a.curve);
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("round,mean_reward,"));
}

#[test]
fn evaluation_table() {
    let (cfg, sc) = small_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net =
        ActorCriticNet::init(cfg.feature_len(), &[8], cfg.max_out_degree(), &mut rng).unwrap();
    let one = evaluate(&net, &cfg, &sc, &[7], 1).unwrap();
    assert_eq!(one.episodes, 1);
    assert_eq!(one.coverage.std, 0.0);
    assert_eq!(one.search_efficiency.std, 0.0);
    let many = evaluate(&net, &cfg, &sc, &[1, 2, 3], 2).unwrap();
    assert_eq!(many.episodes, 6);
    assert!(many.coverage.mean > 0.0 && many.coverage.std >= 0.0);
}

#[test]
fn stat_uses_sample_deviation() {
    let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(Stat::of(&[3.0]).std, 0.0);
}
