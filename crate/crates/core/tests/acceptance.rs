//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits non-zero when any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mfc::bounds::{
    class_bound, joint_bound, loose_bound_class_via_joint, loose_bound_joint_via_class, marginal_bound, BoundConstants,
    ConstantSource,
};
use mfc::distributions::{random_joint_with_weights, ClassWeights, JointDist};
use mfc::env_model::{BanditEnv, BuiltinEnv, CongestionParams, Dims, EnvSpec, Regime};
use mfc::harness::{
    run_deviation_check, run_gap_sweep, run_lemma_certify, BernoulliSweep, DeviationCheckConfig, DeviationSetup,
    GapSweepConfig, LemmaCertifyConfig, PolicyInit,
};
use mfc::meanfield::v_mf;
use mfc::npg::{npg_train, NpgConfig, OccupancyOptions, OccupancySampler};
use mfc::policy::{FixedPolicy, OwnedView, Policy, PolicyArch, PolicyParams};
use mfc::stats::stream_rng;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn congestion() -> BuiltinEnv {
    BuiltinEnv::Congestion(CongestionParams {
        nx: 4,
        nu: 4,
        nk: 2,
        cost: vec![0.5, 1.0],
        mixing: 0.3,
        interaction: None,
        base_reward: None,
        base_kernel: None,
    })
}

fn deviation_counterexample(setup: DeviationSetup) -> Outcome {
    let cfg = DeviationCheckConfig {
        seed: 1,
        setups: vec![setup],
        size: 32,
        n_pop: 200,
        trials: 100_000,
        expect_counterexample: true,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let row = pool.install(|| run_deviation_check(&cfg)).unwrap().remove(0);
    let secs = start.elapsed().as_secs_f64();
    let mut pass = (row.estimate - 0.3147).abs() <= 0.005 && row.estimate > 0.2 && secs < 10.0;
    if setup == DeviationSetup::Action {
        pass &= row.estimate <= 0.4;
    }
    outcome(
        pass,
        format!(
            "estimate {:.5} ± {:.5}, claimed bound 0.2, {secs:.2} s single-threaded",
            row.estimate, row.stderr
        ),
    )
}

fn lemma_suite() -> Outcome {
    let cfg = LemmaCertifyConfig {
        seed: 5,
        gamma: 0.5,
        envs: None,
        checks: None,
        instances: 10_000,
        trials: 64,
        max_class_size: 12,
        policy_scale: 2.0,
        bernoulli: None,
    };
    let start = Instant::now();
    let table = run_lemma_certify(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let violations: usize = table.rows.iter().map(|r| r.violations).sum();
    let failing: Vec<String> = table
        .rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{}/{}", r.env, r.check))
        .collect();
    let worst = table.rows.iter().map(|r| r.worst_ratio).fold(0.0, f64::max);
    outcome(
        table.passed() && secs < 300.0,
        format!(
            "{} rows x 10^4 instances, {violations} violations, worst ratio {worst:.3}, {secs:.0} s{}",
            table.rows.len(),
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing {failing:?}")
            }
        ),
    )
}

fn bernoulli() -> Outcome {
    let cfg = LemmaCertifyConfig {
        seed: 5,
        gamma: 0.5,
        envs: Some(vec![]),
        checks: None,
        instances: 1,
        trials: 2,
        max_class_size: 12,
        policy_scale: 2.0,
        bernoulli: Some(BernoulliSweep {
            instances: 100,
            max_dim: 8,
            trials: 4000,
            c_bound: 1.0,
        }),
    };
    let table = run_lemma_certify(&cfg).unwrap();
    let rows = &table.bernoulli;
    let exact = rows.iter().filter(|r| r.lhs_exact.is_some()).count();
    let violations = rows.iter().filter(|r| !r.pass).count();
    let worst = rows.iter().map(|r| r.lhs_mc / r.rhs).fold(0.0, f64::max);
    outcome(
        rows.len() == 100 && violations == 0,
        format!(
            "{} instances ({exact} exhaustive), {violations} violations, worst LHS/RHS {worst:.3}",
            rows.len()
        ),
    )
}

fn gap_sweep() -> Outcome {
    let cfg = GapSweepConfig {
        seed: 3,
        env: congestion(),
        gamma: 0.5,
        policy: PolicyInit::Uniform,
        populations: vec![vec![5, 5], vec![50, 50], vec![500, 500], vec![5000, 5000]],
        reps: 2000,
        tol: 1e-6,
        initial_state: 0,
        slope_range: Some([-0.65, -0.35]),
    };
    let start = Instant::now();
    let sweep = run_gap_sweep(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let certified = sweep.rows.iter().all(|r| r.bound.is_some());
    let points: Vec<String> = sweep
        .rows
        .iter()
        .map(|r| {
            format!(
                "N={} gap {:.4} ≤ {:.3}",
                r.n_pop,
                r.pathwise_gap,
                r.bound.unwrap_or(f64::NAN)
            )
        })
        .collect();
    outcome(
        sweep.passed() && certified && secs < 900.0,
        format!(
            "{}; slope {:.3} in [-0.65, -0.35], {secs:.0} s",
            points.join(", "),
            sweep.slope("pathwise_gap").unwrap_or(f64::NAN)
        ),
    )
}

fn hand_constants(gamma: f64) -> BoundConstants {
    BoundConstants {
        m_r: 1.0,
        l_r: 0.5,
        l_p: 0.25,
        l_q: 0.0,
        gamma,
        nx: 4,
        nu: 2,
        pops: vec![25, 100],
        source: ConstantSource::Declared,
    }
}

fn random_constants<R: Rng>(rng: &mut R) -> BoundConstants {
    let k = rng.random_range(1..5);
    BoundConstants {
        m_r: rng.random_range(0.0..2.0),
        l_r: rng.random_range(0.0..1.0),
        l_p: rng.random_range(0.0..1.0),
        l_q: rng.random_range(0.0..1.0),
        gamma: rng.random_range(0.0..0.95),
        nx: rng.random_range(1..6),
        nu: rng.random_range(1..6),
        pops: (0..k).map(|_| rng.random_range(1..500)).collect(),
        source: ConstantSource::Declared,
    }
}

/// Violations of `lower ≤ upper` over the first 1000 constant sets on which
/// both bounds are finite.
fn ordering_sweep(
    seed: u64,
    lower: fn(&BoundConstants) -> mfc::Result<f64>,
    upper: fn(&BoundConstants) -> mfc::Result<f64>,
) -> usize {
    let mut rng = stream_rng(seed, 0);
    let (mut compared, mut violations) = (0, 0);
    while compared < 1000 {
        let c = random_constants(&mut rng);
        if let (Ok(a), Ok(b)) = (lower(&c), upper(&c)) {
            compared += 1;
            if a > b * (1.0 + 1e-12) {
                violations += 1;
            }
        }
    }
    violations
}

fn bound_arithmetic() -> Outcome {
    let (r2, r8) = (2f64.sqrt(), 8f64.sqrt());
    let s = 125f64.sqrt();
    let t1 = 1.5 / 0.5 * r2 * 0.12 + 2.25 * 8.0 * r8 * 0.12;
    let t2 = 1.5 / 0.6 * r8 * 0.3 + 2.5 * (0.8 / 0.12) * r8 * 0.3;
    let t3 = 1.5 / 0.5 * r2 / s
        + r8 * 0.5 * 2.25 / 0.5 * (1.5 * 0.12 + 0.5 / s)
        + 2.25 * 8.0 * 0.5 * r8 * (1.25 * 0.12 + 0.25 / s);
    let class_via_joint = 3.5 / 0.8 * r2 * 0.12 + 3.25 * 5.0 * r8 * 0.12;
    let hand = [
        ("joint", joint_bound(&hand_constants(0.5)).unwrap(), t1),
        ("class", class_bound(&hand_constants(0.4)).unwrap(), t2),
        ("marginal", marginal_bound(&hand_constants(0.5)).unwrap(), t3),
        (
            "class_via_joint",
            loose_bound_class_via_joint(&hand_constants(0.2)).unwrap(),
            class_via_joint,
        ),
        (
            "joint_via_class",
            loose_bound_joint_via_class(&hand_constants(0.4)).unwrap(),
            t2,
        ),
    ];
    let hand_fail: Vec<&str> = hand
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-12)
        .map(|h| h.0)
        .collect();
    let marginal = ordering_sweep(61, marginal_bound, joint_bound);
    let joint_via_class = ordering_sweep(62, joint_bound, loose_bound_joint_via_class);
    let class_via_joint = ordering_sweep(63, class_bound, loose_bound_class_via_joint);
    outcome(
        hand_fail.is_empty() && marginal == 0 && joint_via_class == 0 && class_via_joint == 0,
        format!(
            "hand values {}; violations per 1000: marginal ≤ joint {marginal}, joint ≤ joint_via_class \
             {joint_via_class}, class ≤ class_via_joint {class_via_joint}",
            if hand_fail.is_empty() {
                "exact".to_string()
            } else {
                format!("off for {hand_fail:?}")
            }
        ),
    )
}

fn score_gradients() -> Outcome {
    let mut rng = stream_rng(71, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dims = Dims {
            nx: rng.random_range(1..5),
            nu: rng.random_range(2..5),
            nk: rng.random_range(1..4),
        };
        let regime = if rng.random_bool(0.5) {
            Regime::Joint
        } else {
            Regime::Marginal
        };
        let params = PolicyParams::random(PolicyArch::new(regime, dims, rng.random_bool(0.7)), 2.0, &mut rng);
        let pops: Vec<usize> = (0..dims.nk).map(|_| rng.random_range(1..10)).collect();
        let mu = random_joint_with_weights(dims.nx, &ClassWeights::new(pops).unwrap(), &mut rng);
        let view = OwnedView::from_joint(regime, &mu);
        let xs: Vec<usize> = (0..dims.nk).map(|_| rng.random_range(0..dims.nx)).collect();
        let us: Vec<usize> = (0..dims.nk).map(|_| rng.random_range(0..dims.nu)).collect();
        let g = params.score_gradient(&xs, &view.view(), &us).unwrap();
        let h = 1e-6;
        let mut err: f64 = 0.0;
        for i in 0..g.len() {
            let shifted = |delta: f64| {
                let mut phi = params.phi().to_vec();
                phi[i] += delta;
                PolicyParams::new(params.arch(), phi)
                    .unwrap()
                    .log_prob_sum(&xs, &view.view(), &us)
                    .unwrap()
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            err = err.max((fd - g[i]).abs());
        }
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        worst = worst.max(err / scale);
    }
    outcome(
        worst <= 1e-4,
        format!("worst relative error {worst:.2e} over 100 configurations"),
    )
}

fn stop_times() -> Outcome {
    let gamma = 0.7;
    let env = congestion().build(gamma).unwrap();
    let mu0 = JointDist::uniform(4, &ClassWeights::equal(2, 1).unwrap());
    let pol = PolicyParams::random(
        PolicyArch::new(Regime::Joint, env.dims(), true),
        1.0,
        &mut stream_rng(72, 0),
    );
    let sampler = OccupancySampler::new(&env, &pol, &mu0, OccupancyOptions::default()).unwrap();
    let n = 100_000;
    let mut rng = stream_rng(73, 0);
    let times: Vec<usize> = (0..n).map(|_| sampler.sample(&mut rng).stop_time).collect();
    let mut bins = 0;
    while n as f64 * (1.0 - gamma) * gamma.powi(bins as i32) >= 5.0 {
        bins += 1;
    }
    let mut stat = 0.0;
    for t in 0..=bins {
        let (observed, expected) = if t < bins {
            (
                times.iter().filter(|&&s| s == t).count(),
                (1.0 - gamma) * gamma.powi(t as i32),
            )
        } else {
            (times.iter().filter(|&&s| s >= t).count(), gamma.powi(t as i32))
        };
        let e = expected * n as f64;
        stat += (observed as f64 - e).powi(2) / e;
    }
    let p = 1.0 - ChiSquared::new(bins as f64).unwrap().cdf(stat);
    outcome(
        p > 0.01,
        format!("chi-square {stat:.2} on {bins} degrees of freedom, p = {p:.3}"),
    )
}

fn bandit_training() -> Outcome {
    let env = EnvSpec::new(
        BanditEnv {
            nx: 2,
            nk: 1,
            arm_rewards: vec![0.2, 0.8],
        },
        0.0,
    )
    .unwrap();
    let dims = env.dims();
    let mu0 = JointDist::uniform(2, &ClassWeights::new(vec![1]).unwrap());
    let mut optimum = (f64::NEG_INFINITY, vec![]);
    for a0 in 0..2 {
        for a1 in 0..2 {
            let pol = FixedPolicy::deterministic(dims, Regime::Joint, &[a0, a1]).unwrap();
            let v = v_mf(&env, &pol, &mu0, 1e-12).unwrap().value;
            if v > optimum.0 {
                optimum = (v, vec![a0, a1]);
            }
        }
    }
    let cfg = NpgConfig {
        eta: 20.0,
        alpha: 0.5,
        outer_iters: 50,
        inner_iters: 256,
        occupancy: OccupancyOptions::default(),
        value_tol: 1e-9,
        seed: 11,
    };
    let start = Instant::now();
    let report = npg_train(
        &env,
        &PolicyParams::zeros(PolicyArch::new(Regime::Joint, dims, false)),
        &mu0,
        &cfg,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let last = report.final_params().unwrap();
    let view = OwnedView::from_joint(Regime::Joint, &mu0);
    let greedy: Vec<usize> = (0..2)
        .map(|x| {
            let p = last.evaluate(0, x, &view.view()).unwrap();
            if p.values()[1] > p.values()[0] {
                1
            } else {
                0
            }
        })
        .collect();
    let mut sum = report.initial_value;
    let mut running = vec![sum];
    for (j, d) in report.diagnostics.iter().enumerate() {
        sum += d.value;
        running.push(sum / (j + 2) as f64);
    }
    let increasing = running.windows(2).all(|w| w[1] > w[0]);
    let mean = report.mean_value();
    outcome(
        greedy == optimum.1 && mean >= 0.99 * optimum.0 && increasing && secs < 60.0,
        format!(
            "greedy actions {greedy:?} vs optimal {:?}, mean value {mean:.5} vs optimum {:.3}, running mean \
             increasing {increasing}, {secs:.1} s",
            optimum.1, optimum.0
        ),
    )
}

fn csv_bodies(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).unwrap();
            let body = text.lines().skip(1).collect::<Vec<_>>().join("\n");
            (p.file_name().unwrap().to_string_lossy().into_owned(), body)
        })
        .collect()
}

fn cli_determinism() -> Outcome {
    let congestion = r#"{"name":"congestion","nx":4,"nu":4,"nk":2,"cost":[0.5,1.0],"mixing":0.3}"#;
    let configs = [
        ("verify-appendix-m", r#"{"command":"verify-appendix-m","seed":1,"trials":5000}"#.to_string()),
        (
            "gap-sweep",
            format!(r#"{{"command":"gap-sweep","seed":3,"gamma":0.5,"env":{congestion},"populations":[[5,5],[50,50]],"reps":200}}"#),
        ),
        (
            "lemma-certify",
            r#"{"command":"lemma-certify","seed":5,"instances":20,"trials":16,"bernoulli":{"instances":5,"max_dim":4,"trials":200}}"#
                .to_string(),
        ),
        (
            "npg-run",
            format!(r#"{{"command":"npg-run","seed":19,"gamma":0.5,"env":{congestion},"eta":1.0,"alpha":0.1,"outer_iters":5,"inner_iters":64}}"#),
        ),
        (
            "bound-table",
            format!(r#"{{"command":"bound-table","seed":1,"gamma":0.5,"env":{congestion},"policy":{{"kind":"random","scale":0.5,"mu_features":true}},"populations":[[5,5],[500,500]]}}"#),
        ),
    ];
    let tmp = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    for (command, config) in &configs {
        let cfg = tmp.path().join(format!("{command}.json"));
        fs::write(&cfg, config).unwrap();
        let outs: Vec<_> = ["a", "b"]
            .iter()
            .map(|tag| {
                let out = tmp.path().join(format!("{command}-{tag}"));
                let status = Command::new(env!("CARGO_BIN_EXE_mfc"))
                    .args([command, "--config"])
                    .arg(&cfg)
                    .arg("--out")
                    .arg(&out)
                    .output()
                    .unwrap()
                    .status;
                assert!(status.code().is_some_and(|c| c <= 1), "{command} exited with {status}");
                csv_bodies(&out)
            })
            .collect();
        if outs[0].is_empty() || outs[0] != outs[1] {
            differing.push(*command);
        }
    }
    outcome(
        differing.is_empty(),
        format!("{} commands rerun, differing CSV bodies: {differing:?}", configs.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1", || deviation_counterexample(DeviationSetup::Action)),
        ("2", || deviation_counterexample(DeviationSetup::State)),
        ("3", lemma_suite),
        ("4", bernoulli),
        ("5", gap_sweep),
        ("6", bound_arithmetic),
        ("7a", score_gradients),
        ("7b", stop_times),
        ("7c", bandit_training),
        ("8", cli_determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let o = run();
        println!(
            "criterion {name}: {} {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
