mod common;

use std::sync::Arc;

use common::TinyEnv;
use mfc::distributions::{class_to_joint, random_class_collection, ClassWeights, JointDist, ProbVector};
use mfc::env_model::{ClassAsJointEnv, ConstantEnv, Dims, EnvSpec, Regime, RegimeArgs, SisEpidemicEnv, SisParams};
use mfc::meanfield::{mf_rollout, mf_step, mf_step_bar, p_mf, truncation_horizon, v_mf, v_mf_bar, value_in_regime};
use mfc::nagent_sim::{discounted_returns, AgentState};
use mfc::policy::{ClassAsJointPolicy, FixedPolicy, OwnedView, Policy, PolicyArch, PolicyParams};
use mfc::stats::{stream_rng, McEstimate};
use mfc::MfcError;

fn tiny_policy() -> FixedPolicy {
    let dims = Dims { nx: 2, nu: 2, nk: 1 };
    FixedPolicy::new(dims, Regime::Joint, vec![0.7, 0.3, 0.4, 0.6]).unwrap()
}

#[test]
fn one_step_matches_hand_computation() {
    let env = EnvSpec::new(TinyEnv { nk: 1 }, 0.5).unwrap();
    let mu = JointDist::new(2, 1, vec![0.25, 0.75]).unwrap();
    let step = mf_step(&env, &tiny_policy(), &mu).unwrap();
    // ν = (0.25·0.7 + 0.75·0.4, 0.25·0.3 + 0.75·0.6)
    assert!((step.nu.get(0, 0) - 0.475).abs() < 1e-15);
    assert!((step.nu.get(1, 0) - 0.525).abs() < 1e-15);
    // r = 0.175·(-0.19) + 0.075·0.29 + 0.3·0.11 + 0.45·0.59
    assert!((step.rewards[0] - 0.287).abs() < 1e-15);
    // P(1) = 0.175·0.325 + 0.075·0.725 + 0.3·0.425 + 0.45·0.825
    assert!((step.next.get(1, 0) - 0.61).abs() < 1e-15);
    assert!((step.next.get(0, 0) - 0.39).abs() < 1e-15);
}

#[test]
fn two_class_step_keeps_class_masses() {
    let env = EnvSpec::new(TinyEnv { nk: 2 }, 0.5).unwrap();
    let dims = env.dims();
    let pol = FixedPolicy::new(dims, Regime::Joint, vec![0.7, 0.3, 0.4, 0.6, 0.1, 0.9, 0.5, 0.5]).unwrap();
    let mu = JointDist::new(2, 2, vec![0.1, 0.3, 0.2, 0.4]).unwrap();
    let next = p_mf(&env, &pol, &mu).unwrap();
    assert!((next.class_mass(0) - 0.3).abs() < 1e-15);
    assert!((next.class_mass(1) - 0.7).abs() < 1e-15);
    // μ_tot(1) = 0.6.
    // P(1 | x, u) = 0.28 + 0.1 x + 0.4 u, class 1 rows weigh 0.3·(0.1, 0.9), 0.4·(0.5, 0.5).
    let p1 = 0.03 * 0.28 + 0.27 * 0.68 + 0.2 * 0.38 + 0.2 * 0.78;
    assert!((next.get(1, 1) - p1).abs() < 1e-15);
}

#[test]
fn constant_reward_value_is_geometric_sum() {
    let dims = Dims { nx: 3, nu: 2, nk: 2 };
    let env = EnvSpec::new(ConstantEnv { dims, value: 1.5 }, 0.8).unwrap();
    let pol = FixedPolicy::uniform(dims, Regime::Joint);
    let w = ClassWeights::new(vec![2, 6]).unwrap();
    let mu = JointDist::uniform(3, &w);
    let tol = 1e-9;
    let v = v_mf(&env, &pol, &mu, tol).unwrap();
    // Σ_k r_k = Σ_k θ_k · 1.5 = 1.5 per step.
    assert!((v.value - 1.5 / 0.2).abs() < tol);
    assert_eq!(v.horizon, truncation_horizon(0.8, 2.0 * 1.5, tol).unwrap());
    let tail = 2.0 * 1.5 * 0.8f64.powi(v.horizon as i32 + 1) / 0.2;
    assert!(tail < tol);
}

#[test]
fn rollout_follows_repeated_steps() {
    let env = EnvSpec::new(TinyEnv { nk: 1 }, 0.5).unwrap();
    let mu = JointDist::new(2, 1, vec![0.25, 0.75]).unwrap();
    let traj = mf_rollout(&env, &tiny_policy(), &mu, 4).unwrap();
    let mut m = mu.clone();
    for p in &traj.points {
        assert_eq!(p.mu.as_slice(), m.as_slice());
        m = p_mf(&env, &tiny_policy(), &m).unwrap();
    }
}

#[test]
fn joint_route_rejects_class_models() {
    let env = EnvSpec::new(SisEpidemicEnv::new(SisParams::two_class()).unwrap(), 0.5).unwrap();
    let pol = FixedPolicy::uniform(env.dims(), Regime::Class);
    let w = ClassWeights::equal(2, 3).unwrap();
    let mu = JointDist::uniform(2, &w);
    assert!(matches!(mf_step(&env, &pol, &mu), Err(MfcError::RegimeError { .. })));
}

/// Exact `E Σ_{t ≤ T} γ^t (1/2) Σ_i r_i` for two agents of one class by
/// enumerating every action and transition outcome.
fn exact_two_agent_value(env: &EnvSpec, pol: &dyn Policy, xs: [usize; 2], t: usize, horizon: usize) -> f64 {
    let w = ClassWeights::new(vec![2]).unwrap();
    let mut counts = [0u64; 2];
    xs.iter().for_each(|&x| counts[x] += 1);
    let mu = JointDist::from_counts(2, &w, &counts).unwrap();
    let view = OwnedView::from_joint(Regime::Joint, &mu);
    let pi: Vec<_> = xs.iter().map(|&x| pol.evaluate(0, x, &view.view()).unwrap()).collect();
    let mut total = 0.0;
    for u0 in 0..2 {
        for u1 in 0..2 {
            let p = pi[0].get(u0) * pi[1].get(u1);
            if p == 0.0 {
                continue;
            }
            let mut ac = [0u64; 2];
            ac[u0] += 1;
            ac[u1] += 1;
            let nu = JointDist::from_counts(2, &w, &ac).unwrap();
            let args = RegimeArgs::Joint { mu: &mu, nu: &nu };
            let r = 0.5 * (env.reward(0, xs[0], u0, &args).unwrap() + env.reward(0, xs[1], u1, &args).unwrap());
            let mut value = r;
            if t < horizon {
                let k0 = env.transition(0, xs[0], u0, &args).unwrap();
                let k1 = env.transition(0, xs[1], u1, &args).unwrap();
                for y0 in 0..2 {
                    for y1 in 0..2 {
                        let q = k0.get(y0) * k1.get(y1);
                        if q > 0.0 {
                            value += env.gamma() * q * exact_two_agent_value(env, pol, [y0, y1], t + 1, horizon);
                        }
                    }
                }
            }
            total += p * value;
        }
    }
    total
}

#[test]
fn finite_population_value_matches_enumeration() {
    let env = EnvSpec::new(TinyEnv { nk: 1 }, 0.7).unwrap();
    let arch = PolicyArch::new(Regime::Joint, env.dims(), true);
    let pol = PolicyParams::random(arch, 1.5, &mut stream_rng(9, 0));
    let exact = exact_two_agent_value(&env, &pol, [0, 1], 0, 3);
    let x0 = AgentState::new(vec![vec![0, 1]], 2, ClassWeights::new(vec![2]).unwrap()).unwrap();
    let returns = discounted_returns(&env, &pol, &x0, 200_000, 3, 21).unwrap();
    let est = McEstimate::from_samples(&returns);
    assert!(
        (est.mean - exact).abs() <= 4.0 * est.stderr,
        "{} vs {exact} ± {}",
        est.mean,
        est.stderr
    );
}

#[test]
fn class_model_agrees_with_its_joint_translation() {
    let inner = Arc::new(SisEpidemicEnv::new(SisParams::two_class()).unwrap());
    let w = ClassWeights::new(vec![3, 7]).unwrap();
    let env = EnvSpec::from_arc(inner.clone(), 0.6).unwrap();
    let joint_env = EnvSpec::new(ClassAsJointEnv::new(inner, w.clone()).unwrap(), 0.6).unwrap();
    let mut rng = stream_rng(4, 0);
    for _ in 0..20 {
        let params = PolicyParams::random(PolicyArch::new(Regime::Class, env.dims(), true), 2.0, &mut rng);
        let joint_pol = ClassAsJointPolicy::new(Arc::new(params.clone()), w.clone()).unwrap();
        let bar = random_class_collection(2, 2, &mut rng);
        let mu = class_to_joint(&bar, &w).unwrap();
        let sb = mf_step_bar(&env, &params, &bar).unwrap();
        let sj = mf_step(&joint_env, &joint_pol, &mu).unwrap();
        let next = class_to_joint(&sb.next, &w).unwrap();
        for (a, b) in next.as_slice().iter().zip(sj.next.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
        for k in 0..2 {
            assert!((w.theta()[k] * sb.rewards[k] - sj.rewards[k]).abs() < 1e-10);
        }
        let vb = v_mf_bar(&env, &params, &bar, &w, 1e-8).unwrap().value;
        let vj = v_mf(&joint_env, &joint_pol, &mu, 1e-8).unwrap().value;
        assert!((vb - vj).abs() < 1e-10, "{vb} vs {vj}");
        let vr = value_in_regime(&env, &params, &mu, &w, 1e-8).unwrap().value;
        assert!((vb - vr).abs() < 1e-15);
    }
}
