use mfc::distributions::{
    class_to_joint, count_atoms, empirical_class, empirical_joint, joint_to_class, l1, l1_distance,
    random_class_collection, random_joint_with_weights, sample_multinomial, ClassDistCollection, ClassWeights,
    JointDist, MarginalDist, ProbVector, NORM_TOL,
};
use mfc::stats::stream_rng;
use mfc::MfcError;
use proptest::prelude::*;

fn pops_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..40, 1..5)
}

proptest! {
    #[test]
    fn random_joint_is_normalized_with_class_masses(pops in pops_strategy(), n in 1usize..7, seed in any::<u64>()) {
        let w = ClassWeights::new(pops).unwrap();
        let mu = random_joint_with_weights(n, &w, &mut stream_rng(seed, 0));
        let total: f64 = mu.values().iter().sum();
        prop_assert!((total - 1.0).abs() <= NORM_TOL);
        prop_assert!(mu.values().iter().all(|v| *v >= 0.0));
        for (k, t) in w.theta().iter().enumerate() {
            prop_assert!((mu.class_mass(k) - t).abs() <= 1e-9);
        }
    }

    #[test]
    fn joint_class_round_trip(pops in pops_strategy(), n in 1usize..7, seed in any::<u64>()) {
        let w = ClassWeights::new(pops).unwrap();
        let mut rng = stream_rng(seed, 0);
        let mu = random_joint_with_weights(n, &w, &mut rng);
        let back = class_to_joint(&joint_to_class(&mu, &w).unwrap(), &w).unwrap();
        prop_assert!(l1_distance(&mu, &back).unwrap() <= 1e-10);
        let bar = random_class_collection(n, w.nk(), &mut rng);
        let back = joint_to_class(&class_to_joint(&bar, &w).unwrap(), &w).unwrap();
        prop_assert!(l1_distance(&bar, &back).unwrap() <= 1e-10);
    }

    #[test]
    fn joint_distance_bounds_class_distance(pops in pops_strategy(), n in 1usize..6, seed in any::<u64>()) {
        // |μ - μ'| = Σ_k θ_k |μ̄_k - μ̄'_k| ≥ θ_min Σ_k |μ̄_k - μ̄'_k|.
        let w = ClassWeights::new(pops).unwrap();
        let mut rng = stream_rng(seed, 1);
        let a = random_joint_with_weights(n, &w, &mut rng);
        let b = random_joint_with_weights(n, &w, &mut rng);
        let joint = l1_distance(&a, &b).unwrap();
        let ca = joint_to_class(&a, &w).unwrap();
        let cb = joint_to_class(&b, &w).unwrap();
        let weighted: f64 = (0..w.nk()).map(|k| w.theta()[k] * l1(ca.row(k), cb.row(k))).sum();
        prop_assert!((joint - weighted).abs() <= 1e-12);
        let class = l1_distance(&ca, &cb).unwrap();
        prop_assert!(joint <= class * (1.0 + 1e-12) + 1e-15);
        prop_assert!(class <= w.theta_max_inv() * joint * (1.0 + 1e-12) + 1e-15);
    }

    #[test]
    fn serde_round_trip_is_bit_exact(pops in pops_strategy(), n in 1usize..6, seed in any::<u64>()) {
        let w = ClassWeights::new(pops).unwrap();
        let mut rng = stream_rng(seed, 2);
        let mu = random_joint_with_weights(n, &w, &mut rng);
        let back: JointDist = serde_json::from_str(&serde_json::to_string(&mu).unwrap()).unwrap();
        prop_assert_eq!(
            mu.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let bar = random_class_collection(n, w.nk(), &mut rng);
        let back: ClassDistCollection = serde_json::from_str(&serde_json::to_string(&bar).unwrap()).unwrap();
        prop_assert_eq!(bar.as_slice(), back.as_slice());
        let wb: ClassWeights = serde_json::from_str(&serde_json::to_string(&w).unwrap()).unwrap();
        prop_assert_eq!(w.pops(), wb.pops());
    }

    #[test]
    fn empirical_distributions_match_counts(pops in pops_strategy(), n in 1usize..6, seed in any::<u64>()) {
        let w = ClassWeights::new(pops).unwrap();
        let mut rng = stream_rng(seed, 3);
        let agents: Vec<Vec<usize>> = w.pops().iter()
            .map(|&p| (0..p).map(|_| rng.random_range(0..n)).collect())
            .collect();
        let counts = count_atoms(&agents, n, &w).unwrap();
        let mu = empirical_joint(&agents, n, &w).unwrap();
        let bar = empirical_class(&agents, n, &w).unwrap();
        for k in 0..w.nk() {
            for x in 0..n {
                let c = counts[k * n + x] as f64;
                prop_assert!((mu.get(x, k) - c / w.n_pop() as f64).abs() <= 1e-15);
                prop_assert!((bar.get(x, k) - c / w.pops()[k] as f64).abs() <= 1e-15);
            }
            prop_assert!((mu.class_mass(k) - w.theta()[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn multinomial_preserves_total(total in 0u64..10_000, m in 1usize..8, seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 4);
        let probs = mfc::distributions::sample_simplex(m, &mut rng);
        let mut out = vec![0u64; m];
        sample_multinomial(total, &probs, &mut rng, &mut out);
        prop_assert_eq!(out.iter().sum::<u64>(), total);
    }

    #[test]
    fn small_drift_is_renormalized(m in 2usize..10, eps in -5e-10f64..5e-10) {
        let mut v = vec![1.0 / m as f64; m];
        v[0] += eps;
        let d = MarginalDist::new(v).unwrap();
        prop_assert!((d.values().iter().sum::<f64>() - 1.0).abs() <= NORM_TOL);
    }
}

use rand::Rng;

#[test]
fn large_drift_and_negative_mass_are_rejected() {
    assert!(matches!(
        MarginalDist::new(vec![0.5, 0.6]),
        Err(MfcError::NotNormalized { .. })
    ));
    assert!(matches!(
        MarginalDist::new(vec![1.2, -0.2]),
        Err(MfcError::NegativeEntry { .. })
    ));
    let w = ClassWeights::new(vec![1, 3]).unwrap();
    let wrong = JointDist::new(2, 2, vec![0.25, 0.25, 0.25, 0.25]).unwrap();
    assert!(matches!(
        wrong.check_weights(&w),
        Err(MfcError::ThetaIncompatible { .. })
    ));
}

#[test]
fn unknown_serde_keys_are_rejected() {
    let bad = r#"{"n_atoms":1,"n_classes":1,"values":[1.0],"extra":0}"#;
    assert!(serde_json::from_str::<JointDist>(bad).is_err());
    let bad_shape = r#"{"n_atoms":2,"n_classes":1,"values":[1.0]}"#;
    assert!(serde_json::from_str::<JointDist>(bad_shape).is_err());
}
