mod common;

use common::*;
use dmpo_autodiff::{Backend, Graph, Tensor};
use dmpo_core::envs::EnvKind;
use dmpo_core::nn::{VelocityNet, VELOCITY_GROUP};
use dmpo_core::ppo::*;
use dmpo_core::rng;
use dmpo_core::sampler;
use proptest::prelude::*;

#[test]
fn gae_equals_double_sum() {
    let mut r = rng::seeded(0);
    for _ in 0..1000 {
        let (rw, v, d, g, l) = random_episode(&mut r);
        let (adv, ret) = gae(&rw, &v, &d, g, l).unwrap();
        let oracle = gae_oracle(&rw, &v, &d, g, l);
        for t in 0..rw.len() {
            assert!((adv[t] - oracle[t]).abs() < 1e-10);
            assert_eq!(ret[t], adv[t] + v[t]);
        }
    }
}

#[test]
fn gae_lambda_zero_is_td_error() {
    let (adv, _) = gae(&[1.0, -0.5, 2.0], &[0.1, 0.2, 0.3, 0.4], &[false, false, false], 0.9, 0.0).unwrap();
    let td = [1.0 + 0.9 * 0.2 - 0.1, -0.5 + 0.9 * 0.3 - 0.2, 2.0 + 0.9 * 0.4 - 0.3];
    for (a, b) in adv.iter().zip(td) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn surrogate_hand_cases() {
    assert_eq!(clipped_pg_loss(&[2.0], &[1.0], 0.2).unwrap(), -1.2);
    assert_eq!(clipped_pg_loss(&[0.5], &[-1.0], 0.2).unwrap(), 0.8);
    let adv = [0.5, -2.0, 1.25, 0.0];
    let ones = [1.0; 4];
    let mean_neg = -adv.iter().sum::<f64>() / 4.0;
    assert_eq!(clipped_pg_loss(&ones, &adv, 0.2).unwrap(), mean_neg);
    assert_eq!(unclipped_pg_loss(&ones, &adv).unwrap(), mean_neg);
    assert_eq!(value_loss(&[0.0], &[2.0]).unwrap(), 2.0);
}

#[test]
fn value_loss_gradient_is_scaled_error() {
    let v = Tensor::column(&[0.5, -1.0, 2.0]);
    let ret = [1.0, 1.0, 1.0];
    let mut g = Graph::new();
    let vv = g.input(v.clone());
    let r = g.constant(Tensor::column(&ret));
    let e = g.sub(&vv, &r).unwrap();
    let sq = g.square(&e).unwrap();
    let m = g.mean(&sq).unwrap();
    let loss = g.scale(&m, 0.5).unwrap();
    let grad = g.backward_scalar(loss).unwrap().wrt(vv).unwrap().clone();
    assert_eq!(g.value(&loss).item(), value_loss(v.data(), &ret).unwrap());
    for ((gi, vi), ri) in grad.data().iter().zip(v.data()).zip(ret) {
        assert!((gi - (vi - ri) / 3.0).abs() < 1e-15);
    }
}

#[test]
fn ratio_is_one_before_any_update() {
    let (ac, reference) = nets(1, 0.05, false);
    let batch = batch_from(&ac, 16, 3, 2);
    let cfg = Stage2Config::default();
    let l = stage2_loss(&ac, &reference, &batch, &cfg, 0.0).unwrap();
    assert_eq!(l.clip_frac, 0.0);
    assert_eq!(l.approx_kl, 0.0);
    let mean_neg = -batch.advantages.iter().sum::<f64>() / 16.0;
    assert!((l.pg - mean_neg).abs() < 1e-12);
}

#[test]
fn components_sum_to_total() {
    let (ac, reference) = nets(2, 0.1, true);
    let mut batch = batch_from(&ac, 12, 2, 3);
    for (i, lp) in batch.old_logprob.iter_mut().enumerate() {
        *lp += 0.3 * (i as f64 - 6.0) / 6.0;
    }
    let cfg = Stage2Config::default();
    let l = stage2_loss(&ac, &reference, &batch, &cfg, 0.37).unwrap();
    let sum = l.pg + cfg.value_coef * l.value + cfg.entropy_coef * l.entropy + 0.37 * l.bc;
    assert!((sum - l.total).abs() < 1e-12);
    assert!(l.clip_frac > 0.0);

    let bare = Stage2Config {
        value_coef: 0.0,
        entropy_coef: 0.0,
        ..cfg
    };
    let only_pg = stage2_loss(&ac, &reference, &batch, &bare, 0.0).unwrap();
    let ratios: Vec<f64> = batch
        .old_logprob
        .iter()
        .enumerate()
        .map(|(i, old)| {
            let c = sampler::DenoiseChain {
                states: batch.states.iter().map(|s| s.row_slice(i).to_vec()).collect(),
                means: vec![],
                noise: vec![],
                sigma: ac.sigma(),
                log_sigma: ac.log_sigma.data().to_vec(),
                logprob_terms: vec![],
                total_logprob: 0.0,
                prior_logprob: 0.0,
                nfe_used: 0,
            };
            let new = sampler::chain_logprob(&ac.policy, &c, batch.obs.row_slice(i)).unwrap();
            ppo_ratio(new, *old).unwrap()
        })
        .collect();
    let expect = clipped_pg_loss(&ratios, &batch.advantages, bare.clip_eps).unwrap();
    assert!((only_pg.total - expect).abs() < 1e-12);
}

#[test]
fn stage2_gradients_match_finite_differences() {
    for learnable in [false, true] {
        let (ac, reference) = nets(3, 0.2, learnable);
        let mut batch = batch_from(&ac, 8, 2, 4);
        offset_logprobs(&mut batch);
        let err = stage2_grad_error(&ac, &reference, &batch, &Stage2Config::default(), 0.3);
        assert!(err < 1e-4, "learnable={learnable}: {err}");
    }
}

#[test]
fn bc_loss_cases() {
    let cfg = tiny_config();
    let net = VelocityNet::init(7, 3, 2, &cfg).unwrap();
    let mut r = rng::seeded(5);
    let obs = uniform(&mut r, 10, 3, -1.0, 1.0);
    let z1 = normal(&mut r, 10, 2);
    assert_eq!(bc_loss(&net, &net, &obs, &z1).unwrap(), 0.0);

    let a = ShiftField { c: vec![0.1, 0.2], obs_dim: 3 };
    let b = ShiftField { c: vec![0.4, -0.2], obs_dim: 3 };
    assert!((bc_loss(&a, &b, &obs, &z1).unwrap() - 0.25).abs() < 1e-12);

    // Only the current network carries parameters on the tape.
    let reference = VelocityNet::init(8, 3, 2, &cfg).unwrap();
    let mut g = Graph::new();
    let l = bc_loss_with(&mut g, &reference, &net, &obs, &z1).unwrap();
    let grads = g.backward_scalar(l).unwrap().gradients();
    let mut n = net.clone();
    assert_eq!(grads.len(), n.params_mut().len());
    assert!(grads.iter().all(|(k, _)| k.group == VELOCITY_GROUP));
}

#[test]
fn bc_weight_schedule() {
    let cfg = Stage2Config {
        bc_init: 1.0,
        bc_final: 0.2,
        bc_start: 10,
        bc_end: 30,
        ..Default::default()
    };
    assert_eq!(cfg.bc_weight(0).unwrap(), 1.0);
    assert!((cfg.bc_weight(20).unwrap() - 0.6).abs() < 1e-15);
    assert_eq!(cfg.bc_weight(30).unwrap(), 0.2);
    assert_eq!(cfg.bc_weight(1000).unwrap(), 0.2);
}

fn small_run(iterations: usize, seed: u64) -> Stage2Config {
    Stage2Config {
        iterations,
        num_envs: 2,
        rollout_steps: 16,
        minibatch_size: 16,
        update_epochs: 2,
        seed,
        ..Default::default()
    }
}

#[test]
fn finetune_keeps_reference_frozen_and_is_deterministic() {
    let cfg = tiny_config();
    let policy = VelocityNet::init(9, 4, 2, &cfg).unwrap();
    let reference = policy.clone();
    let before = reference.checksum();
    let run = small_run(3, 4);
    let ac = init_actor_critic(policy.clone(), &cfg, &run).unwrap();
    let a = finetune(ac.clone(), &reference, EnvKind::PointReach, &run).unwrap();
    let b = finetune(ac, &reference, EnvKind::PointReach, &run).unwrap();
    assert_eq!(reference.checksum(), before);
    assert_eq!(a.reference.checksum(), before);
    assert_ne!(a.nets.policy.checksum(), before);
    assert_eq!(a.nets.policy.checksum(), b.nets.policy.checksum());
    assert_eq!(format!("{:?}", a.metrics), format!("{:?}", b.metrics));
    assert!(a.metrics.iter().all(|m| m.pg.is_finite() && m.v.is_finite()));
}

#[test]
fn zero_iterations_leave_policy_unchanged() {
    let cfg = tiny_config();
    let policy = VelocityNet::init(10, 4, 2, &cfg).unwrap();
    let run = small_run(0, 1);
    let ac = init_actor_critic(policy.clone(), &cfg, &run).unwrap();
    let out = finetune(ac, &policy, EnvKind::PointReach, &run).unwrap();
    assert_eq!(out.nets.policy, policy);
    assert!(out.metrics.is_empty());
}

#[test]
fn rollout_fills_advantages_per_environment() {
    let cfg = tiny_config();
    let policy = VelocityNet::init(11, 4, 2, &cfg).unwrap();
    let run = small_run(1, 2);
    let ac = init_actor_critic(policy, &cfg, &run).unwrap();
    let mut envs = VecEnv::new(EnvKind::PointReach, 3, 2);
    let batch = collect_rollout(&ac, &mut envs, 10, &run, &mut rng::seeded(0)).unwrap();
    assert_eq!(batch.len(), 30);
    for seg in batch.transitions.chunks(10) {
        assert!(seg[9].end);
        let rewards: Vec<f64> = seg.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = seg.iter().map(|t| t.value).collect();
        let next: Vec<f64> = seg.iter().map(|t| t.next_value).collect();
        let term: Vec<bool> = seg.iter().map(|t| t.terminal).collect();
        let end: Vec<bool> = seg.iter().map(|t| t.end).collect();
        let (adv, _) = gae_general(&rewards, &values, &next, &term, &end, run.gamma, run.gae_lambda).unwrap();
        for (t, a) in seg.iter().zip(adv) {
            assert_eq!(t.advantage, a);
            assert_eq!(t.ret, a + t.value);
        }
    }
    // Old log-probs reproduce at unchanged parameters.
    for t in &batch.transitions {
        let lp = sampler::chain_logprob(&ac.policy, &t.chain, &t.obs).unwrap();
        assert!((ppo_ratio(lp, t.chain.total_logprob).unwrap() - 1.0).abs() < 1e-10);
    }
    let v = ac.value.predict(&Tensor::row(&batch.transitions[0].obs)).unwrap();
    assert_eq!(v.item(), batch.transitions[0].value);
}

proptest! {
    #[test]
    fn clipping_never_lowers_the_loss(r in 0.0f64..5.0, a in -10.0f64..10.0, eps in 0.01f64..0.5) {
        let c = clipped_pg_loss(&[r], &[a], eps).unwrap();
        let u = unclipped_pg_loss(&[r], &[a]).unwrap();
        prop_assert!(c >= u);
        if (1.0 - eps..=1.0 + eps).contains(&r) {
            prop_assert_eq!(c, u);
        }
    }

    #[test]
    fn ratio_roundtrip(new in -50.0f64..50.0, old in -50.0f64..50.0) {
        let r = ppo_ratio(new, old).unwrap();
        prop_assert!((r.ln() - (new - old)).abs() < 1e-9);
    }
}
