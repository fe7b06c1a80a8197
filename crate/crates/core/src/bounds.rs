//! Closed-form bounds on the gap between finite-population and mean-field
//! values, their empirical certification, and gap measurement.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{l1, l1_distance, random_class_collection, random_joint, ClassWeights, JointDist};
use crate::env_model::{estimate_lipschitz, Dims, EnvSpec, LipschitzField, Regime};
use crate::error::{MfcError, Result};
use crate::meanfield::{mf_step, mf_step_bar, truncation_horizon, v_mf, v_mf_bar};
use crate::nagent_sim::{deviation_estimate, discounted_returns, AgentState, DeviationKind};
use crate::policy::{Policy, PolicyArch, PolicyParams};
use crate::stats::{stream_rng, McEstimate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantSource {
    #[default]
    Declared,
    Estimated,
}

/// Model constants and population sizes entering a bound. Whether `l_r`,
/// `l_p`, `l_q` are joint, per-class or marginal constants depends on the
/// bound they are used with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConstants {
    pub m_r: f64,
    pub l_r: f64,
    pub l_p: f64,
    pub l_q: f64,
    pub gamma: f64,
    pub nx: usize,
    pub nu: usize,
    pub pops: Vec<usize>,
    #[serde(default)]
    pub source: ConstantSource,
}

impl BoundConstants {
    /// Declared model constants and the policy's Lipschitz constant.
    pub fn from_env(env: &EnvSpec, policy: &dyn Policy, pops: &[usize]) -> Result<Self> {
        let c = env.constants();
        let d = env.dims();
        Ok(BoundConstants {
            m_r: c.m_r,
            l_r: c.l_r,
            l_p: c.l_p,
            l_q: policy.lipschitz_q()?,
            gamma: env.gamma(),
            nx: d.nx,
            nu: d.nu,
            pops: pops.to_vec(),
            source: ConstantSource::Declared,
        })
    }

    /// Model constants estimated by sampling; the policy constant stays the
    /// closed-form one.
    pub fn estimated<R: Rng + ?Sized>(
        env: &EnvSpec,
        policy: &dyn Policy,
        pops: &[usize],
        samples: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut c = Self::from_env(env, policy, pops)?;
        c.m_r = estimate_lipschitz(env, LipschitzField::RewardBound, samples, rng);
        c.l_r = estimate_lipschitz(env, LipschitzField::Reward, samples, rng);
        c.l_p = estimate_lipschitz(env, LipschitzField::Transition, samples, rng);
        c.source = ConstantSource::Estimated;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(MfcError::InvalidDiscount(self.gamma));
        }
        ClassWeights::new(self.pops.clone())?;
        for (name, v) in [
            ("M_R", self.m_r),
            ("L_R", self.l_r),
            ("L_P", self.l_p),
            ("L_Q", self.l_q),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(MfcError::ConfigError(format!(
                    "{name} = {v} must be finite and non-negative"
                )));
            }
        }
        if self.nx == 0 || self.nu == 0 {
            return Err(MfcError::ShapeError("empty state or action space".into()));
        }
        Ok(())
    }

    fn k(&self) -> f64 {
        self.pops.len() as f64
    }

    fn n_pop(&self) -> f64 {
        self.pops.iter().sum::<usize>() as f64
    }

    /// `Σ_k √N_k / N`.
    fn joint_rate(&self) -> f64 {
        self.pops.iter().map(|&n| (n as f64).sqrt()).sum::<f64>() / self.n_pop()
    }

    /// `Σ_k 1/√N_k`.
    fn class_rate(&self) -> f64 {
        self.pops.iter().map(|&n| 1.0 / (n as f64).sqrt()).sum()
    }

    pub fn c_r(&self) -> f64 {
        self.m_r + self.l_r
    }

    pub fn c_p(&self) -> f64 {
        2.0 + self.l_p
    }

    pub fn s_r(&self) -> f64 {
        self.m_r * (1.0 + self.l_q) + self.l_r * (2.0 + self.l_q)
    }

    pub fn s_p(&self) -> f64 {
        (1.0 + self.l_q) + self.l_p * (2.0 + self.l_q)
    }

    pub fn c_r_bar(&self) -> f64 {
        self.m_r + self.l_r
    }

    pub fn c_p_bar(&self) -> f64 {
        2.0 + self.k() * self.l_p
    }

    pub fn s_r_bar(&self) -> f64 {
        self.m_r * (1.0 + self.l_q) + self.l_r * (2.0 + self.k() * self.l_q)
    }

    pub fn s_p_bar(&self) -> f64 {
        let k = self.k();
        (1.0 + k * self.l_q) + k * self.l_p * (2.0 + k * self.l_q)
    }

    /// Coefficient of `|μ - μ'|` in the marginal reward continuity bound.
    pub fn s_r_joint_part(&self) -> f64 {
        self.m_r + self.l_r
    }

    /// Coefficient of `|μ[X] - μ'[X]|` in the marginal reward continuity bound.
    pub fn s_r_marginal_part(&self) -> f64 {
        self.m_r * self.l_q + self.l_r * (1.0 + self.l_q)
    }

    /// Coefficient of `|μ - μ'|` in the marginal transition continuity bound.
    pub fn s_p_joint_part(&self) -> f64 {
        1.0 + self.l_p
    }

    /// Coefficient of `|μ[X] - μ'[X]|` in the marginal transition continuity bound.
    pub fn s_p_marginal_part(&self) -> f64 {
        self.l_q + self.l_p * (1.0 + self.l_q)
    }
}

/// `S_R / (S_P - 1) [1/(1-γS_P) - 1/(1-γ)]`, written as
/// `S_R γ / ((1-γS_P)(1-γ))`, which is finite at `S_P = 1`.
fn propagation_factor(s_r: f64, s_p: f64, gamma: f64) -> Result<f64> {
    let product = gamma * s_p;
    if product >= 1.0 {
        return Err(MfcError::BoundInvalid { product });
    }
    Ok(s_r * gamma / ((1.0 - product) * (1.0 - gamma)))
}

/// Joint-regime bound on `|V^N - V^MF|` with rate `Σ_k √N_k / N`.
pub fn joint_bound(c: &BoundConstants) -> Result<f64> {
    c.validate()?;
    let g = c.gamma;
    let rate = c.joint_rate();
    let nu = c.nu as f64;
    let xu = (c.nx * c.nu) as f64;
    Ok(c.c_r() / (1.0 - g) * nu.sqrt() * rate + c.c_p() * propagation_factor(c.s_r(), c.s_p(), g)? * xu.sqrt() * rate)
}

/// Class-regime bound with rate `Σ_k 1/√N_k`.
pub fn class_bound(c: &BoundConstants) -> Result<f64> {
    c.validate()?;
    let g = c.gamma;
    let rate = c.class_rate();
    let xu = ((c.nx * c.nu) as f64).sqrt();
    Ok(
        c.c_r_bar() / (1.0 - g) * xu * rate
            + c.c_p_bar() * propagation_factor(c.s_r_bar(), c.s_p_bar(), g)? * xu * rate,
    )
}

/// Marginal-regime bound.
pub fn marginal_bound(c: &BoundConstants) -> Result<f64> {
    c.validate()?;
    let g = c.gamma;
    let rate = c.joint_rate();
    let inv_sqrt_n = 1.0 / c.n_pop().sqrt();
    let nu = c.nu as f64;
    let xu = ((c.nx * c.nu) as f64).sqrt();
    let prop = propagation_factor(c.s_r(), c.s_p(), g)?;
    let first = c.c_r() / (1.0 - g) * nu.sqrt() * inv_sqrt_n;
    let second = xu * g * c.c_p() / (1.0 - g) * (c.s_r_joint_part() * rate + c.s_r_marginal_part() * inv_sqrt_n);
    // γ/(1-γS_P) - γ/(1-γ) = γ times the bracket folded into `prop`.
    let third = c.c_p() * prop * g * xu * (c.s_p_joint_part() * rate + c.s_p_marginal_part() * inv_sqrt_n);
    Ok(first + second + third)
}

/// Joint-regime bound applied to a class-regime system: class constants
/// are scaled by `max_k 1/θ_k` and plugged into [`joint_bound`].
pub fn loose_bound_class_via_joint(c: &BoundConstants) -> Result<f64> {
    c.validate()?;
    let t = ClassWeights::new(c.pops.clone())?.theta_max_inv();
    let scaled = BoundConstants {
        l_r: c.l_r * t,
        l_p: c.l_p * t,
        l_q: c.l_q * t,
        ..c.clone()
    };
    joint_bound(&scaled)
}

/// Class-regime bound applied to a joint-regime system by treating the
/// joint constants as class constants.
pub fn loose_bound_joint_via_class(c: &BoundConstants) -> Result<f64> {
    class_bound(c)
}

/// The bound matching a model regime.
pub fn bound_for_regime(regime: Regime, c: &BoundConstants) -> Result<f64> {
    match regime {
        Regime::Joint => joint_bound(c),
        Regime::Class => class_bound(c),
        Regime::Marginal => marginal_bound(c),
    }
}

/// Finite-population versus mean-field value at one population size.
#[derive(Clone, Debug, Serialize)]
pub struct GapReport {
    pub pops: Vec<usize>,
    pub n_pop: usize,
    pub horizon: usize,
    pub v_mf: f64,
    /// Per-replication discounted returns summarised.
    pub v_n: McEstimate,
    /// `|E V^N - v^MF|` as estimated.
    pub gap: f64,
    /// `E |V^N - v^MF|`, which upper-bounds the bias gap.
    pub pathwise_gap: McEstimate,
    pub constants: BoundConstants,
    /// `None` when the bound is not valid for these constants.
    pub bound: Option<f64>,
}

impl GapReport {
    /// Both gap measures, at the upper end of their 95% intervals, lie below
    /// a valid bound.
    pub fn within_bound(&self) -> bool {
        match self.bound {
            Some(b) => self.gap - crate::stats::Z95 * self.v_n.stderr <= b && self.pathwise_gap.ci_low <= b,
            None => false,
        }
    }
}

/// Measures the value gap starting from the agents `x0`; `mu0` must be their
/// empirical distribution. Replications use streams `0..reps` of `seed`.
pub fn measure_gap(
    env: &EnvSpec,
    policy: &dyn Policy,
    x0: &AgentState,
    mu0: &JointDist,
    reps: usize,
    tol: f64,
    seed: u64,
) -> Result<GapReport> {
    let distance = l1_distance(mu0, &x0.empirical())?;
    if distance > 1e-9 {
        return Err(MfcError::InitMismatch { distance });
    }
    let d = env.dims();
    let weights = x0.weights();
    let horizon = truncation_horizon(env.gamma(), d.nk as f64 * env.constants().m_r, tol)?;
    let value = match env.regime() {
        Regime::Class => {
            let bar = crate::distributions::joint_to_class(mu0, weights)?;
            v_mf_bar(env, policy, &bar, weights, tol)?
        }
        _ => v_mf(env, policy, mu0, tol)?,
    };
    debug_assert_eq!(value.horizon, horizon);
    let returns = discounted_returns(env, policy, x0, reps, horizon, seed)?;
    let v_n = McEstimate::from_samples(&returns);
    let abs: Vec<f64> = returns.iter().map(|r| (r - value.value).abs()).collect();
    let constants = BoundConstants::from_env(env, policy, weights.pops())?;
    let bound = match bound_for_regime(env.regime(), &constants) {
        Ok(b) => Some(b),
        Err(MfcError::BoundInvalid { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(GapReport {
        pops: weights.pops().to_vec(),
        n_pop: weights.n_pop(),
        horizon,
        v_mf: value.value,
        gap: (v_n.mean - value.value).abs(),
        v_n,
        pathwise_gap: McEstimate::from_samples(&abs),
        constants,
        bound,
    })
}

/// Inequalities certified by [`certify`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LemmaCheck {
    /// `|ν^MF(μ) - ν^MF(μ')| ≤ (1 + L_Q) |μ - μ'|`.
    ActionContinuity,
    /// `Σ_k |r_k^MF(μ) - r_k^MF(μ')| ≤ S_R |μ - μ'|`.
    RewardContinuity,
    /// `|P^MF(μ) - P^MF(μ')| ≤ S_P |μ - μ'|`.
    StateContinuity,
    /// `E|ν^N - ν^MF(μ^N)| ≤ √|U| Σ√N_k / N`.
    ActionDeviation,
    /// `E|(1/N)Σr - Σ_k r_k^MF(μ^N)| ≤ C_R √|U| Σ√N_k / N`.
    RewardDeviation,
    /// `E|μ^N_{t+1} - P^MF(μ^N)| ≤ C_P √(|X||U|) Σ√N_k / N`.
    StateDeviation,
    /// `|ν̄^MF(μ̄) - ν̄^MF(μ̄')| ≤ (1 + K L_Q) |μ̄ - μ̄'|`.
    ClassActionContinuity,
    /// `Σ_k θ_k |r̄_k^MF(μ̄) - r̄_k^MF(μ̄')| ≤ S̄_R |μ̄ - μ̄'|`.
    ClassRewardContinuity,
    /// `|P̄^MF(μ̄) - P̄^MF(μ̄')| ≤ S̄_P |μ̄ - μ̄'|`.
    ClassStateContinuity,
    /// `E|ν̄^N - ν̄^MF(μ̄^N)| ≤ √|U| Σ 1/√N_k`.
    ClassActionDeviation,
    /// `E|(1/N)Σr - Σ_k θ_k r̄_k^MF(μ̄^N)| ≤ C̄_R √|U| Σ 1/√N_k`.
    ClassRewardDeviation,
    /// `E|μ̄^N_{t+1} - P̄^MF(μ̄^N)| ≤ C̄_P √(|X||U|) Σ 1/√N_k`.
    ClassStateDeviation,
    /// `|ν^MF(μ) - ν^MF(μ')| ≤ |μ - μ'| + L_Q |μ[X] - μ'[X]|`.
    MarginalActionContinuity,
    /// `Σ_k |r_k^MF(μ) - r_k^MF(μ')| ≤ S_R' |μ - μ'| + S_R'' |μ[X] - μ'[X]|`.
    MarginalRewardContinuity,
    /// `|P^MF(μ) - P^MF(μ')| ≤ S_P' |μ - μ'| + S_P'' |μ[X] - μ'[X]|`.
    MarginalStateContinuity,
    /// `E|ν^N[U] - ν^MF(μ^N)[U]| ≤ √|U| / √N`.
    MarginalActionDeviation,
    /// `E|(1/N)Σr - Σ_k r_k^MF(μ^N)| ≤ C_R √|U| / √N`.
    MarginalRewardDeviation,
    /// `E|μ^N_{t+1}[X] - P^MF(μ^N)[X]| ≤ C_P √(|X||U|) / √N`.
    MarginalStateDeviation,
}

impl LemmaCheck {
    pub const ALL: [LemmaCheck; 18] = [
        LemmaCheck::ActionContinuity,
        LemmaCheck::RewardContinuity,
        LemmaCheck::StateContinuity,
        LemmaCheck::ActionDeviation,
        LemmaCheck::RewardDeviation,
        LemmaCheck::StateDeviation,
        LemmaCheck::ClassActionContinuity,
        LemmaCheck::ClassRewardContinuity,
        LemmaCheck::ClassStateContinuity,
        LemmaCheck::ClassActionDeviation,
        LemmaCheck::ClassRewardDeviation,
        LemmaCheck::ClassStateDeviation,
        LemmaCheck::MarginalActionContinuity,
        LemmaCheck::MarginalRewardContinuity,
        LemmaCheck::MarginalStateContinuity,
        LemmaCheck::MarginalActionDeviation,
        LemmaCheck::MarginalRewardDeviation,
        LemmaCheck::MarginalStateDeviation,
    ];

    /// Regime of the policy and of the distance used by the check.
    pub fn regime(self) -> Regime {
        use LemmaCheck::*;
        match self {
            ActionContinuity | RewardContinuity | StateContinuity | ActionDeviation | RewardDeviation
            | StateDeviation => Regime::Joint,
            ClassActionContinuity
            | ClassRewardContinuity
            | ClassStateContinuity
            | ClassActionDeviation
            | ClassRewardDeviation
            | ClassStateDeviation => Regime::Class,
            _ => Regime::Marginal,
        }
    }

    pub fn is_deviation(self) -> bool {
        use LemmaCheck::*;
        matches!(
            self,
            ActionDeviation
                | RewardDeviation
                | StateDeviation
                | ClassActionDeviation
                | ClassRewardDeviation
                | ClassStateDeviation
                | MarginalActionDeviation
                | MarginalRewardDeviation
                | MarginalStateDeviation
        )
    }

    /// Joint checks hold for joint- and marginal-regime models (marginal
    /// constants are also joint constants); the others need their own regime.
    pub fn applies_to(self, env_regime: Regime) -> bool {
        match self.regime() {
            Regime::Joint => env_regime != Regime::Class,
            r => r == env_regime,
        }
    }

    pub fn name(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }
}

/// Outcome of certifying one inequality on one model.
#[derive(Clone, Debug, Serialize)]
pub struct LemmaReport {
    pub check: LemmaCheck,
    pub env: String,
    pub instances: usize,
    pub violations: usize,
    /// Largest `LHS / RHS` over instances with a positive right-hand side.
    pub worst_ratio: f64,
}

impl LemmaReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// Settings of a certification sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyOptions {
    pub instances: usize,
    /// Monte-Carlo trials per deviation instance.
    pub trials: usize,
    /// Largest class size drawn for deviation instances.
    pub max_class_size: usize,
    /// Policy parameters are drawn from `[-s, s]` with `s` uniform on `[0, policy_scale]`.
    pub policy_scale: f64,
    pub seed: u64,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        CertifyOptions {
            instances: 10_000,
            trials: 64,
            max_class_size: 12,
            policy_scale: 2.0,
            seed: 0,
        }
    }
}

/// One sampled instance: `(lhs, rhs)` with the left-hand side already
/// reduced to `mean - 3 stderr` for Monte-Carlo checks.
fn instance<R: Rng>(env: &EnvSpec, check: LemmaCheck, opts: &CertifyOptions, rng: &mut R) -> Result<(f64, f64)> {
    let d: Dims = env.dims();
    let regime = check.regime();
    let scale = rng.random_range(0.0..=opts.policy_scale);
    let policy = PolicyParams::random(PolicyArch::new(regime, d, true), scale, rng);
    let pops: Vec<usize> = (0..d.nk).map(|_| rng.random_range(1..=opts.max_class_size)).collect();
    let mut c = BoundConstants::from_env(env, &policy, &pops)?;
    c.validate()?;
    let k = d.nk as f64;
    let nu = d.nu as f64;
    let xu = ((d.nx * d.nu) as f64).sqrt();
    use LemmaCheck::*;
    if check.is_deviation() {
        let weights = ClassWeights::new(pops.clone())?;
        let states = pops
            .iter()
            .map(|&n| (0..n).map(|_| rng.random_range(0..d.nx)).collect())
            .collect();
        let config = AgentState::new(states, d.nx, weights.clone())?;
        let kind = match check {
            ActionDeviation | ClassActionDeviation | MarginalActionDeviation => DeviationKind::Action,
            RewardDeviation | ClassRewardDeviation | MarginalRewardDeviation => DeviationKind::Reward,
            _ => DeviationKind::State,
        };
        let est = deviation_estimate(env, &policy, &config, kind, regime, opts.trials, rng.random())?;
        let joint_rate = weights.sum_sqrt() / weights.n_pop() as f64;
        let class_rate = weights.sum_inv_sqrt();
        let marg_rate = 1.0 / (weights.n_pop() as f64).sqrt();
        let rhs = match check {
            ActionDeviation => nu.sqrt() * joint_rate,
            RewardDeviation => c.c_r() * nu.sqrt() * joint_rate,
            StateDeviation => c.c_p() * xu * joint_rate,
            ClassActionDeviation => nu.sqrt() * class_rate,
            ClassRewardDeviation => c.c_r_bar() * nu.sqrt() * class_rate,
            ClassStateDeviation => c.c_p_bar() * xu * class_rate,
            MarginalActionDeviation => nu.sqrt() * marg_rate,
            MarginalRewardDeviation => c.c_r() * nu.sqrt() * marg_rate,
            _ => c.c_p() * xu * marg_rate,
        };
        return Ok((est.lower3(), rhs));
    }
    match regime {
        Regime::Class => {
            c.pops = pops;
            let theta = ClassWeights::new(c.pops.clone())?.theta().to_vec();
            let a = random_class_collection(d.nx, d.nk, rng);
            let b = random_class_collection(d.nx, d.nk, rng);
            let dist = l1_distance(&a, &b)?;
            let (sa, sb) = (mf_step_bar(env, &policy, &a)?, mf_step_bar(env, &policy, &b)?);
            Ok(match check {
                ClassActionContinuity => (l1_distance(&sa.nu, &sb.nu)?, (1.0 + k * c.l_q) * dist),
                ClassRewardContinuity => {
                    let lhs = sa
                        .rewards
                        .iter()
                        .zip(&sb.rewards)
                        .zip(&theta)
                        .map(|((x, y), t)| t * (x - y).abs())
                        .sum();
                    (lhs, c.s_r_bar() * dist)
                }
                _ => (l1_distance(&sa.next, &sb.next)?, c.s_p_bar() * dist),
            })
        }
        _ => {
            let a = random_joint(d.nx, d.nk, rng);
            let b = random_joint(d.nx, d.nk, rng);
            let dist = l1_distance(&a, &b)?;
            let mdist = l1(a.marginal().values(), b.marginal().values());
            let (sa, sb) = (mf_step(env, &policy, &a)?, mf_step(env, &policy, &b)?);
            let reward_diff: f64 = sa.rewards.iter().zip(&sb.rewards).map(|(x, y)| (x - y).abs()).sum();
            Ok(match check {
                ActionContinuity => (l1_distance(&sa.nu, &sb.nu)?, (1.0 + c.l_q) * dist),
                RewardContinuity => (reward_diff, c.s_r() * dist),
                StateContinuity => (l1_distance(&sa.next, &sb.next)?, c.s_p() * dist),
                MarginalActionContinuity => (l1_distance(&sa.nu, &sb.nu)?, dist + c.l_q * mdist),
                MarginalRewardContinuity => (reward_diff, c.s_r_joint_part() * dist + c.s_r_marginal_part() * mdist),
                _ => (
                    l1_distance(&sa.next, &sb.next)?,
                    c.s_p_joint_part() * dist + c.s_p_marginal_part() * mdist,
                ),
            })
        }
    }
}

/// Certifies `check` on `env` over random instances. An instance violates
/// the inequality when its left-hand side exceeds the right-hand side by
/// more than a relative `1e-9` plus `1e-12`.
pub fn certify(env: &EnvSpec, check: LemmaCheck, opts: &CertifyOptions) -> Result<LemmaReport> {
    if !check.applies_to(env.regime()) {
        return Err(MfcError::RegimeError {
            expected: check.regime(),
            found: env.regime(),
        });
    }
    let salt = LemmaCheck::ALL.iter().position(|c| *c == check).unwrap_or(0) as u64;
    let results: Vec<(f64, f64)> = (0..opts.instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(opts.seed ^ (salt << 48), i as u64);
            instance(env, check, opts, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for (lhs, rhs) in results {
        if lhs > rhs * (1.0 + 1e-9) + 1e-12 {
            violations += 1;
        }
        if rhs > 0.0 {
            worst = worst.max(lhs / rhs);
        }
    }
    Ok(LemmaReport {
        check,
        env: env.name(),
        instances: opts.instances,
        violations,
        worst_ratio: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts() -> BoundConstants {
        BoundConstants {
            m_r: 1.0,
            l_r: 0.5,
            l_p: 0.25,
            l_q: 0.0,
            gamma: 0.5,
            nx: 4,
            nu: 2,
            pops: vec![25, 100],
            source: ConstantSource::Declared,
        }
    }

    #[test]
    fn joint_bound_hand_value() {
        // S_R = 1 + 0.5*2 = 2, S_P = 1 + 0.25*2 = 1.5, C_R = 1.5, C_P = 2.25,
        // rate = (5 + 10) / 125 = 0.12.
        // first = 1.5 / 0.5 * √2 * 0.12, second = 2.25 * (2*0.5/(0.25*0.5)) * √8 * 0.12.
        let want = 3.0 * 2f64.sqrt() * 0.12 + 2.25 * 8.0 * 8f64.sqrt() * 0.12;
        assert!((joint_bound(&consts()).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn invalid_when_propagation_explodes() {
        let c = BoundConstants { gamma: 0.9, ..consts() };
        assert!(matches!(joint_bound(&c), Err(MfcError::BoundInvalid { .. })));
    }

    #[test]
    fn check_names_are_snake_case() {
        assert_eq!(LemmaCheck::ClassStateDeviation.name(), "class_state_deviation");
    }
}
