use std::collections::BTreeMap;

use anchorlab::env::group_normalize;
use anchorlab::fixtures::{binary_counterexample, multimodal_instance, random_instance, MULTIMODAL_BETA};
use anchorlab::metrics::mass_on_correct;
use anchorlab::oracle::{exact_log_partition, expected_residual_gradient, exact_tilted_target, Sampling};
use anchorlab::policy::TabularPolicy;
use anchorlab::rng::StreamKey;
use anchorlab::trainers::{
    cross_entropy, cross_entropy_gradient, flowrl_step, grpo_step_on, run_training, Anchor, FlowRlState, GradientEstimator,
    Objective, PolicyInit, TrainConfig, TrainPrompt,
};

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

fn cfg(objective: Objective, beta: f64, steps: usize) -> TrainConfig {
    TrainConfig {
        objective,
        beta,
        steps,
        ..Default::default()
    }
}

#[test]
fn exact_disa_descends_monotonically_to_target() {
    let (inst, pi_ref) = binary_counterexample();
    let c = TrainConfig {
        estimator: GradientEstimator::Exact,
        lr_policy: 0.1,
        init: PolicyInit::Uniform,
        ..cfg(Objective::Disa, 1.0, 400)
    };
    let prompts = [TrainPrompt { inst: &inst, pi_ref: &pi_ref, sft_data: vec![] }];
    let out = run_training(&c, &prompts, Some(&Anchor::Exact)).unwrap();
    let mut prev = out.run.initial.loss;
    assert!(prev > 0.0);
    for r in &out.run.records {
        assert!(r.loss <= prev + 1e-15, "step {}: {} > {prev}", r.step, r.loss);
        prev = r.loss;
    }
    let p = out.policies[0].probs(inst.enumeration());
    assert!((p[1] - 2.0 / 3.0).abs() < 1e-6, "{p:?}");
    assert!(out.run.last().kl_fwd < 1e-10);
}

#[test]
fn shifted_anchor_changes_gradient_by_residual_correlation() {
    let (inst, pi_ref) = random_instance(41, 2, 3, 0.4);
    let beta = 1.3;
    let pi = TabularPolicy::random(inst.space(), 0.7, &mut StreamKey::root(2).stream());
    let base = exact_log_partition(&pi_ref, &inst, beta);
    let e = inst.enumeration();
    let probs = pi.probs(e);
    let lp = pi.log_probs(e);
    let lr = pi_ref.log_probs(e);
    for eta in [-0.8, 0.05, 1.5] {
        let g0 = expected_residual_gradient(&pi, &pi_ref, &inst, beta, base, Sampling::OnPolicy, true);
        let g1 = expected_residual_gradient(&pi, &pi_ref, &inst, beta, base + eta, Sampling::OnPolicy, true);
        let mut diff = g1.gradient.clone();
        diff.add_scaled(&g0.gradient, -1.0);
        // 2 eta sum_o pi(o) R(o) grad log pi(o), assembled trajectory by trajectory
        let mut want = anchorlab::policy::LogitTable::for_space(inst.space());
        for i in 0..e.len() {
            let r = base + lp[i] - lr[i] - beta * inst.tilde_rewards()[i];
            let score = pi.score_gradient(e.get(i)).unwrap();
            want.add_scaled(&score, 2.0 * eta * probs[i] * r);
        }
        let mut err = diff.clone();
        err.add_scaled(&want, -1.0);
        assert!(err.max_abs() < 1e-10 * (1.0 + want.max_abs()), "eta {eta}: {}", err.max_abs());
        // at the exact target the residual is constant so the shift alone moves nothing
        let t = anchorlab::oracle::target_policy(&pi_ref, &inst, beta);
        let gt = expected_residual_gradient(&t, &pi_ref, &inst, beta, base + eta, Sampling::OnPolicy, true);
        assert!(gt.gradient.max_abs() < 1e-9);
    }
}

#[test]
fn frozen_policy_partition_converges_to_mean_residual() {
    let (inst, pi_ref) = random_instance(43, 2, 3, 0.4);
    let beta = 2.0;
    let pi = TabularPolicy::random(inst.space(), 1.0, &mut StreamKey::root(4).stream());
    let c = TrainConfig {
        lr_policy: 0.0,
        lr_partition: 0.1,
        estimator: GradientEstimator::Exact,
        ..cfg(Objective::FlowRl, beta, 0)
    };
    let e = inst.enumeration();
    let (p, lp, lr) = (pi.probs(e), pi.log_probs(e), pi_ref.log_probs(e));
    let want: f64 = (0..e.len()).map(|i| p[i] * (beta * inst.tilde_rewards()[i] + lr[i] - lp[i])).sum();
    let mut policy = pi.clone();
    let mut state = FlowRlState::new([inst.id()]);
    let mut rng = StreamKey::root(0).stream();
    for _ in 0..300 {
        flowrl_step(&mut policy, &mut state, &pi_ref, &inst, &c, &mut rng).unwrap();
    }
    assert_eq!(policy, pi);
    assert!((state.get(inst.id()) - want).abs() < 1e-12, "{} vs {want}", state.get(inst.id()));
}

#[test]
fn flowrl_recovers_target_and_partition_on_two_outcome_instance() {
    let (inst, pi_ref) = binary_counterexample();
    let c = TrainConfig {
        lr_policy: 0.05,
        lr_partition: 0.05,
        ..cfg(Objective::FlowRl, 1.0, 4000)
    };
    let prompts = [TrainPrompt { inst: &inst, pi_ref: &pi_ref, sft_data: vec![] }];
    let out = run_training(&c, &prompts, None).unwrap();
    let target = exact_tilted_target(&pi_ref, &inst, 1.0).target_probs;
    let p = out.policies[0].probs(inst.enumeration());
    assert!(kl(&p, &target) < 1e-3, "{p:?}");
    let z = out.flow_state.unwrap().get(inst.id());
    assert!((z - 1.5f64.ln()).abs() < 0.02, "{z}");
}

#[test]
fn flowrl_partition_value_feeds_the_next_policy_gradient() {
    let (inst, pi_ref) = random_instance(44, 2, 2, 0.5);
    let c = cfg(Objective::FlowRl, 1.0, 0);
    let key = StreamKey::root(8);
    let step = |z: f64| {
        let mut pol = pi_ref.clone();
        let mut st = FlowRlState::new([inst.id()]);
        st.set(inst.id(), z);
        flowrl_step(&mut pol, &mut st, &pi_ref, &inst, &c, &mut key.stream()).unwrap().gradient
    };
    let (a, b) = (step(0.0), step(0.5));
    let mut d = a.clone();
    d.add_scaled(&b, -1.0);
    assert!(d.max_abs() > 1e-6);
}

#[test]
fn grpo_ignores_degenerate_groups_and_affine_maps() {
    let (inst, pi_ref) = random_instance(45, 3, 3, 0.3);
    let c = cfg(Objective::Grpo, 1.0, 0);
    let idx = [0usize, 5, 7, 11, 20, 3];
    let mut pol = pi_ref.clone();
    let out = grpo_step_on(&mut pol, &inst, &idx, &[1.0; 6], &c).unwrap();
    assert_eq!(out.gradient.max_abs(), 0.0);
    assert_eq!(pol, pi_ref);

    let rewards = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
    let mut p1 = pi_ref.clone();
    let g1 = grpo_step_on(&mut p1, &inst, &idx, &rewards, &c).unwrap().gradient;
    for (a, b) in [(3.0, -2.0), (0.01, 100.0), (17.0, 0.5)] {
        let mapped: Vec<f64> = rewards.iter().map(|r| a * r + b).collect();
        let mut p2 = pi_ref.clone();
        let g2 = grpo_step_on(&mut p2, &inst, &idx, &mapped, &c).unwrap().gradient;
        let mut d = g1.clone();
        d.add_scaled(&g2, -1.0);
        assert!(d.max_abs() < 1e-12, "a={a} b={b}: {}", d.max_abs());
    }
    assert!(group_normalize(&[1.0], 1e-6).is_err());
}

#[test]
fn grpo_concentrates_on_few_trajectories() {
    let (inst, pi_ref) = multimodal_instance();
    let correct = inst.correct_indices();
    let target = exact_tilted_target(&pi_ref, &inst, MULTIMODAL_BETA).target_probs;
    let target_top = correct.iter().map(|&i| target[i]).fold(0.0, f64::max);
    for seed in 0..5 {
        let c = TrainConfig {
            seed,
            lr_policy: 0.1,
            ..cfg(Objective::Grpo, MULTIMODAL_BETA, 2000)
        };
        let prompts = [TrainPrompt { inst: &inst, pi_ref: &pi_ref, sft_data: vec![] }];
        let out = run_training(&c, &prompts, None).unwrap();
        let p = out.policies[0].probs(inst.enumeration());
        assert!(mass_on_correct(&p, &inst).unwrap() > 0.95, "seed {seed}");
        let top = correct.iter().map(|&i| p[i]).fold(0.0, f64::max);
        assert!(top > 3.0 * target_top, "seed {seed}: top {top} vs target {target_top}");
        // entropy of the distribution restricted to correct trajectories
        let cond_entropy = |q: &[f64]| {
            let m: f64 = correct.iter().map(|&i| q[i]).sum();
            -correct.iter().map(|&i| q[i] / m).filter(|x| *x > 0.0).map(|x| x * x.ln()).sum::<f64>()
        };
        let (h, ht) = (cond_entropy(&p), cond_entropy(&target));
        assert!(h < ht - 0.5, "seed {seed}: {h} vs {ht}");
    }
}

#[test]
fn sft_fits_teacher_samples_not_the_tilted_target() {
    let (inst, pi_ref) = random_instance(46, 2, 3, 0.4);
    let correct = inst.correct_indices();
    assert!(correct.len() >= 2);
    let c = TrainConfig {
        lr_policy: 0.5,
        ..cfg(Objective::Sft, 1.0, 20000)
    };
    let prompts = [TrainPrompt { inst: &inst, pi_ref: &pi_ref, sft_data: correct.clone() }];
    let out = run_training(&c, &prompts, None).unwrap();
    let p = out.policies[0].probs(inst.enumeration());
    let mut uniform = vec![0.0; p.len()];
    for &i in &correct {
        uniform[i] = 1.0 / correct.len() as f64;
    }
    assert!(kl(&uniform, &p) < 1e-3, "{}", kl(&uniform, &p));
    let target = exact_tilted_target(&pi_ref, &inst, 1.0).target_probs;
    assert!(kl(&target, &p) > 0.05);

    // a single teacher sample drives the policy toward a point mass
    let prompts = [TrainPrompt { inst: &inst, pi_ref: &pi_ref, sft_data: vec![correct[0]] }];
    let out = run_training(&c, &prompts, None).unwrap();
    assert!(out.policies[0].probs(inst.enumeration())[correct[0]] > 0.99);
}

#[test]
fn cross_entropy_gradient_is_a_descent_direction() {
    let (inst, pi_ref) = random_instance(47, 3, 2, 0.5);
    let data = vec![1, 4, 4, 7];
    let g = cross_entropy_gradient(&pi_ref, &inst, &data).unwrap();
    let f0 = cross_entropy(&pi_ref, &inst, &data).unwrap();
    let mut prev = f0;
    for k in 1..=6 {
        let t = 10f64.powi(-k);
        let mut p = pi_ref.clone();
        p.apply(&g, -t);
        let f = cross_entropy(&p, &inst, &data).unwrap();
        assert!(f < f0);
        // first-order prediction f0 - t |g|^2 becomes exact as t -> 0
        let rel = ((f0 - f) / (t * g.dot(&g)) - 1.0).abs();
        assert!(rel < 10.0 * t + 1e-6, "t={t}: {rel}");
        prev = f;
    }
    assert!(prev < f0);
    assert!(cross_entropy(&pi_ref, &inst, &[]).is_err());
}

#[test]
fn zero_steps_returns_initial_state() {
    let (inst, pi_ref) = random_instance(48, 2, 2, 0.5);
    let prompts = [TrainPrompt { inst: &inst, pi_ref: &pi_ref, sft_data: vec![] }];
    let out = run_training(&cfg(Objective::Disa, 1.0, 0), &prompts, Some(&Anchor::Exact)).unwrap();
    assert!(out.run.records.is_empty());
    assert_eq!(out.run.best_step, 0);
    assert_eq!(out.run.last(), &out.run.initial);
    assert_eq!(out.policies[0], pi_ref);
    assert_eq!(out.run.to_csv().lines().count(), 2);
}

#[test]
fn every_objective_is_deterministic_for_a_seed() {
    let (inst, pi_ref) = random_instance(49, 2, 3, 0.4);
    let correct = inst.correct_indices();
    let prompts = [TrainPrompt { inst: &inst, pi_ref: &pi_ref, sft_data: correct }];
    let mut table = BTreeMap::new();
    table.insert(inst.id().to_string(), 0.3);
    let anchor = Anchor::Table(table);
    for obj in Objective::ALL {
        let c = TrainConfig { seed: 5, ..cfg(obj, 1.0, 50) };
        let a = run_training(&c, &prompts, Some(&anchor)).unwrap();
        let b = run_training(&c, &prompts, Some(&anchor)).unwrap();
        assert_eq!(a.run, b.run, "{obj}");
        assert_eq!(a.policies, b.policies);
        if obj != Objective::Sft {
            let other = run_training(&TrainConfig { seed: 6, ..c.clone() }, &prompts, Some(&anchor)).unwrap();
            assert_ne!(a.policies, other.policies, "{obj}");
        }
    }
}

#[test]
fn disa_without_anchor_and_bad_configs_are_refused() {
    let (inst, pi_ref) = random_instance(50, 2, 2, 0.5);
    let prompts = [TrainPrompt { inst: &inst, pi_ref: &pi_ref, sft_data: vec![] }];
    assert!(run_training(&cfg(Objective::Disa, 1.0, 1), &prompts, None).unwrap_err().is_config());
    assert!(run_training(&cfg(Objective::Sft, 1.0, 1), &prompts, None).unwrap_err().is_config());
    let bad = TrainConfig { group_size: 1, ..cfg(Objective::Grpo, 1.0, 1) };
    assert!(run_training(&bad, &prompts, None).unwrap_err().is_config());
    let bad = TrainConfig { beta: -1.0, ..cfg(Objective::FlowRl, 1.0, 1) };
    assert!(run_training(&bad, &prompts, None).is_err());
}

#[test]
fn length_normalized_residual_gradient_matches_finite_differences() {
    use anchorlab::trainers::tb_direction;
    let (inst, pi_ref) = random_instance(51, 2, 3, 0.4);
    let beta = 1.2;
    let anchor = 0.3;
    let e = inst.enumeration();
    let loss = |pol: &TabularPolicy| -> f64 {
        let (p, lp, lr) = (pol.probs(e), pol.log_probs(e), pi_ref.log_probs(e));
        (0..e.len())
            .map(|i| {
                let len = e.get(i).tokens().len() + usize::from(e.get(i).stopped());
                let r = anchor + (lp[i] - lr[i]) / len as f64 - beta * inst.tilde_rewards()[i];
                p[i] * r * r
            })
            .sum()
    };
    let c = TrainConfig {
        estimator: GradientEstimator::Exact,
        length_normalized: true,
        ..cfg(Objective::Disa, beta, 0)
    };
    let pol = TabularPolicy::random(inst.space(), 1.0, &mut StreamKey::root(10).stream());
    let (l, grad, _) = tb_direction(&pol, &pi_ref, &inst, anchor, &c, &mut StreamKey::root(0).stream());
    assert!((l - loss(&pol)).abs() < 1e-12);
    let dir = TabularPolicy::random(inst.space(), 1.0, &mut StreamKey::root(11).stream()).logits().clone();
    let h = 1e-5;
    let (mut up, mut down) = (pol.clone(), pol.clone());
    up.apply(&dir, h);
    down.apply(&dir, -h);
    let fd = (loss(&up) - loss(&down)) / (2.0 * h);
    assert!((fd - grad.dot(&dir)).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad.dot(&dir));

    // the flag is off by default and then matches the plain residual
    let plain = TrainConfig { length_normalized: false, ..c.clone() };
    let (lp, _, _) = tb_direction(&pol, &pi_ref, &inst, anchor, &plain, &mut StreamKey::root(0).stream());
    assert!(!TrainConfig::default().length_normalized);
    assert!((lp - loss(&pol)).abs() > 1e-6);
}
