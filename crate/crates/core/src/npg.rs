//! Natural policy gradient training through mean-field occupancy sampling.
//!
//! Each outer iteration estimates the natural gradient direction by
//! stochastic gradient descent on the compatible-function-approximation
//! loss `E[(A - (1-γ) w·g)^2]`, where `g` is the score of the joint action of
//! one representative agent per class and the expectation runs over the
//! discounted occupancy of the mean-field system.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{l1, sample_categorical, JointDist};
use crate::env_model::{EnvSpec, OwnedArgs, Regime};
use crate::error::{MfcError, Result};
use crate::meanfield::{mf_step, v_mf};
use crate::policy::{action_table, OwnedView, Policy, PolicyParams};
use crate::stats::stream_rng;

/// Inner iterates with a larger Euclidean norm abort training.
pub const DIVERGENCE_NORM: f64 = 1e6;
/// Occupancy and rollout lengths are capped where `γ^T` drops below this.
pub const HORIZON_CAP_MASS: f64 = 1e-8;

/// How the advantage of a sampled `(x, μ, u)` is estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageEstimator {
    /// With probability 1/2 roll out from `(x, μ, u)` and return twice the
    /// discounted reward; otherwise resample the actions from the policy,
    /// roll out, and return minus twice the reward. Unbiased for `Q - V`.
    #[default]
    ResampledAction,
    /// One rollout starting with a transition out of the sampled point,
    /// assigned at random to the `Q` or the `V` slot, returning `2 (Q - V)`.
    /// Its mean is zero.
    SharedRollout,
}

/// How per-class rewards of the representatives are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardWeighting {
    /// `Σ_k θ_k r_k`, whose mean matches the mean-field value.
    #[default]
    ClassWeighted,
    /// `Σ_k r_k`.
    Unweighted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupancyOptions {
    #[serde(default)]
    pub estimator: AdvantageEstimator,
    #[serde(default)]
    pub weighting: RewardWeighting,
}

/// One draw `(x, μ, u)` from the discounted occupancy with an advantage
/// estimate.
#[derive(Clone, Debug)]
pub struct OccupancySample {
    /// One state per class.
    pub states: Vec<usize>,
    pub mu: JointDist,
    /// One action per class.
    pub actions: Vec<usize>,
    pub advantage: f64,
    /// Sampled stopping time, `P(T = t) = (1-γ) γ^t`.
    pub stop_time: usize,
    /// The stopping time or the rollout reached the horizon cap.
    pub capped: bool,
}

/// `ceil(log(1e-8) / log γ)`, zero for `γ = 0`.
pub fn horizon_cap(gamma: f64) -> usize {
    if gamma <= 0.0 {
        0
    } else {
        (HORIZON_CAP_MASS.ln() / gamma.ln()).ceil() as usize
    }
}

/// Mean-field path `μ_t`, action tables and environment arguments, shared by
/// all samples drawn for one policy.
pub struct OccupancySampler<'a> {
    env: &'a EnvSpec,
    opts: OccupancyOptions,
    theta: Vec<f64>,
    cap: usize,
    mus: Vec<JointDist>,
    tables: Vec<Vec<f64>>,
    args: Vec<OwnedArgs>,
}

impl<'a> OccupancySampler<'a> {
    pub fn new(env: &'a EnvSpec, policy: &'a dyn Policy, mu0: &JointDist, opts: OccupancyOptions) -> Result<Self> {
        if env.regime() == Regime::Class || policy.regime() == Regime::Class {
            return Err(MfcError::RegimeError {
                expected: Regime::Joint,
                found: Regime::Class,
            });
        }
        let theta = mu0.class_masses();
        if let Some(k) = theta.iter().position(|&t| t <= 0.0) {
            return Err(MfcError::InvalidWeights(format!("class {k} has no mass")));
        }
        let cap = horizon_cap(env.gamma());
        let d = env.dims();
        let len = 2 * cap + 2;
        let mut mus = Vec::with_capacity(len);
        let mut tables = Vec::with_capacity(len);
        let mut args = Vec::with_capacity(len);
        let mut mu = mu0.clone();
        for _ in 0..len {
            let step = mf_step(env, policy, &mu)?;
            let view = OwnedView::from_joint(policy.regime(), &mu);
            tables.push(action_table(policy, &view.view())?);
            args.push(match env.regime() {
                Regime::Joint => OwnedArgs::Joint(mu.clone(), step.nu.clone()),
                _ => OwnedArgs::Marginal(mu.marginal(), step.nu.marginal()),
            });
            mus.push(mu);
            mu = step.next;
        }
        debug_assert_eq!(tables[0].len(), d.nk * d.nx * d.nu);
        Ok(OccupancySampler {
            env,
            opts,
            theta,
            cap,
            mus,
            tables,
            args,
        })
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    fn draw_actions<R: Rng + ?Sized>(&self, t: usize, xs: &[usize], rng: &mut R) -> Vec<usize> {
        let d = self.env.dims();
        xs.iter()
            .enumerate()
            .map(|(k, &x)| {
                let s = (k * d.nx + x) * d.nu;
                sample_categorical(&self.tables[t][s..s + d.nu], rng)
            })
            .collect()
    }

    /// Moves every representative one step along the mean-field path and
    /// redraws its action at the new population state.
    fn advance<R: Rng + ?Sized>(&self, t: usize, xs: &mut [usize], us: &mut Vec<usize>, rng: &mut R) {
        let d = self.env.dims();
        let args = self.args[t].view();
        let mut kernel = vec![0.0; d.nx];
        for k in 0..d.nk {
            self.env.model().transition_into(k, xs[k], us[k], &args, &mut kernel);
            xs[k] = sample_categorical(&kernel, rng);
        }
        *us = self.draw_actions(t + 1, xs, rng);
    }

    fn reward(&self, t: usize, xs: &[usize], us: &[usize]) -> f64 {
        let args = self.args[t].view();
        let model = self.env.model();
        (0..xs.len())
            .map(|k| {
                let r = model.reward(k, xs[k], us[k], &args);
                match self.opts.weighting {
                    RewardWeighting::ClassWeighted => self.theta[k] * r,
                    RewardWeighting::Unweighted => r,
                }
            })
            .sum()
    }

    /// Discounted reward from time `t` with geometric stopping; returns the
    /// reward and whether the cap cut the rollout.
    fn rollout<R: Rng + ?Sized>(
        &self,
        mut t: usize,
        xs: &mut [usize],
        us: &mut Vec<usize>,
        rng: &mut R,
    ) -> (f64, bool) {
        let gamma = self.env.gamma();
        let limit = t + self.cap;
        let mut total = 0.0;
        loop {
            total += self.reward(t, xs, us);
            if !rng.random_bool(gamma) {
                return (total, false);
            }
            if t >= limit {
                return (total, true);
            }
            self.advance(t, xs, us, rng);
            t += 1;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> OccupancySample {
        let d = self.env.dims();
        let gamma = self.env.gamma();
        let mu0 = &self.mus[0];
        let mut col = vec![0.0; d.nx];
        let mut xs: Vec<usize> = (0..d.nk)
            .map(|k| {
                for (x, c) in col.iter_mut().enumerate() {
                    *c = mu0.get(x, k) / self.theta[k];
                }
                sample_categorical(&col, rng)
            })
            .collect();
        let mut us = self.draw_actions(0, &xs, rng);
        let mut t = 0;
        let mut capped = false;
        while rng.random_bool(gamma) {
            if t >= self.cap {
                capped = true;
                break;
            }
            self.advance(t, &mut xs, &mut us, rng);
            t += 1;
        }
        let (states, actions) = (xs.clone(), us.clone());
        let take_q = rng.random_bool(0.5);
        let (reward, cut) = match self.opts.estimator {
            AdvantageEstimator::ResampledAction => {
                if !take_q {
                    us = self.draw_actions(t, &xs, rng);
                }
                self.rollout(t, &mut xs, &mut us, rng)
            }
            AdvantageEstimator::SharedRollout => {
                self.advance(t, &mut xs, &mut us, rng);
                self.rollout(t + 1, &mut xs, &mut us, rng)
            }
        };
        let advantage = if take_q { 2.0 * reward } else { -2.0 * reward };
        OccupancySample {
            states,
            mu: self.mus[t].clone(),
            actions,
            advantage,
            stop_time: t,
            capped: capped || cut,
        }
    }
}

/// One occupancy draw for `policy` started from `mu0`.
pub fn sample_occupation<R: Rng + ?Sized>(
    env: &EnvSpec,
    policy: &dyn Policy,
    mu0: &JointDist,
    opts: OccupancyOptions,
    rng: &mut R,
) -> Result<OccupancySample> {
    Ok(OccupancySampler::new(env, policy, mu0, opts)?.sample(rng))
}

/// Stochastic gradient `h = (w·g - Â/(1-γ)) g` of the inner loss, scaled so
/// that `E h = ∇_w E[(A - (1-γ) w·g)^2] / (2 (1-γ)^2)`.
pub fn inner_direction(params: &PolicyParams, w: &[f64], sample: &OccupancySample, gamma: f64) -> Result<Vec<f64>> {
    if w.len() != params.arch().dim() {
        return Err(MfcError::ShapeError(format!(
            "direction of length {} for {} parameters",
            w.len(),
            params.arch().dim()
        )));
    }
    let view = OwnedView::from_joint(params.arch().regime, &sample.mu);
    let mut g = params.score_gradient(&sample.states, &view.view(), &sample.actions)?;
    let dot: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
    let coef = dot - sample.advantage / (1.0 - gamma);
    g.iter_mut().for_each(|v| *v *= coef);
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpgConfig {
    /// Outer step size.
    pub eta: f64,
    /// Inner step size.
    pub alpha: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    #[serde(default)]
    pub occupancy: OccupancyOptions,
    /// Truncation tolerance of the per-iterate mean-field value.
    #[serde(default = "default_value_tol")]
    pub value_tol: f64,
    pub seed: u64,
}

fn default_value_tol() -> f64 {
    1e-6
}

/// Per-iterate record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterateDiagnostics {
    /// Index of the iterate `Φ_j`, starting at 1.
    pub j: usize,
    /// `v^MF(μ_0, π_{Φ_j})`.
    pub value: f64,
    /// Euclidean norm of the averaged inner iterate used to reach `Φ_j`.
    pub w_norm: f64,
    /// Samples whose stopping time or rollout hit the horizon cap.
    pub capped_samples: usize,
    pub wall_time_ms: f64,
}

/// Every iterate `Φ_1, ..., Φ_J`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub iterates: Vec<PolicyParams>,
}

#[derive(Clone, Debug)]
pub struct NpgReport {
    pub initial_value: f64,
    pub snapshot: PolicySnapshot,
    pub diagnostics: Vec<IterateDiagnostics>,
}

impl NpgReport {
    /// `(1/J) Σ_j v^MF(Φ_j)`.
    pub fn mean_value(&self) -> f64 {
        let n = self.diagnostics.len().max(1) as f64;
        self.diagnostics.iter().map(|d| d.value).sum::<f64>() / n
    }

    pub fn final_params(&self) -> Option<&PolicyParams> {
        self.snapshot.iterates.last()
    }
}

/// Runs `outer_iters` natural policy gradient iterations from `phi0`.
/// Sample `l` of iteration `j` uses stream `j * inner_iters + l` of the seed.
pub fn npg_train(env: &EnvSpec, phi0: &PolicyParams, mu0: &JointDist, cfg: &NpgConfig) -> Result<NpgReport> {
    let d = env.dims();
    let arch = phi0.arch();
    if (arch.nk, arch.nx, arch.nu) != (d.nk, d.nx, d.nu) || (mu0.n(), mu0.nk()) != (d.nx, d.nk) {
        return Err(MfcError::ShapeError(
            "policy, model and initial distribution disagree".into(),
        ));
    }
    if cfg.inner_iters == 0 {
        return Err(MfcError::ConfigError("inner_iters must be positive".into()));
    }
    let gamma = env.gamma();
    let initial_value = v_mf(env, phi0, mu0, cfg.value_tol)?.value;
    let mut phi = phi0.clone();
    let mut iterates = Vec::with_capacity(cfg.outer_iters);
    let mut diagnostics = Vec::with_capacity(cfg.outer_iters);
    let start = Instant::now();
    for j in 0..cfg.outer_iters {
        let sampler = OccupancySampler::new(env, &phi, mu0, cfg.occupancy)?;
        let samples: Vec<OccupancySample> = (0..cfg.inner_iters)
            .into_par_iter()
            .map(|l| sampler.sample(&mut stream_rng(cfg.seed, (j * cfg.inner_iters + l) as u64)))
            .collect();
        let capped_samples = samples.iter().filter(|s| s.capped).count();
        let mut w = vec![0.0; arch.dim()];
        let mut w_sum = vec![0.0; arch.dim()];
        for (l, sample) in samples.iter().enumerate() {
            let h = inner_direction(&phi, &w, sample, gamma)?;
            for (wi, hi) in w.iter_mut().zip(&h) {
                *wi -= cfg.alpha * hi;
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= DIVERGENCE_NORM) {
                return Err(MfcError::DivergedInnerLoop {
                    outer: j,
                    inner: l,
                    norm,
                });
            }
            for (s, wi) in w_sum.iter_mut().zip(&w) {
                *s += wi;
            }
        }
        let w_avg: Vec<f64> = w_sum.iter().map(|s| s / cfg.inner_iters as f64).collect();
        phi.step(cfg.eta, &w_avg)?;
        let value = v_mf(env, &phi, mu0, cfg.value_tol)?.value;
        diagnostics.push(IterateDiagnostics {
            j: j + 1,
            value,
            w_norm: w_avg.iter().map(|v| v * v).sum::<f64>().sqrt(),
            capped_samples,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        iterates.push(phi.clone());
    }
    Ok(NpgReport {
        initial_value,
        snapshot: PolicySnapshot { iterates },
        diagnostics,
    })
}

/// Empirical properties of the score under the occupancy measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FisherDiagnostics {
    /// Smallest eigenvalue of `E[g g^T]`.
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// Largest observed `|g|_1`.
    pub max_score_norm: f64,
    /// Largest observed `|g(Φ) - g(Φ')|_1 / |Φ - Φ'|_1` for small random
    /// perturbations.
    pub score_lipschitz: f64,
}

pub fn fisher_diagnostics(
    env: &EnvSpec,
    params: &PolicyParams,
    mu0: &JointDist,
    samples: usize,
    seed: u64,
) -> Result<FisherDiagnostics> {
    let sampler = OccupancySampler::new(env, params, mu0, OccupancyOptions::default())?;
    let dim = params.arch().dim();
    let mut fisher = DMatrix::<f64>::zeros(dim, dim);
    let mut max_norm: f64 = 0.0;
    let mut lipschitz: f64 = 0.0;
    let mut rng = stream_rng(seed, 0);
    for _ in 0..samples {
        let s = sampler.sample(&mut rng);
        let view = OwnedView::from_joint(params.arch().regime, &s.mu);
        let g = params.score_gradient(&s.states, &view.view(), &s.actions)?;
        max_norm = max_norm.max(g.iter().map(|v| v.abs()).sum());
        let gv = nalgebra::DVector::from_vec(g.clone());
        fisher += &gv * gv.transpose();
        let delta: Vec<f64> = (0..dim).map(|_| rng.random_range(-1e-4..1e-4)).collect();
        let mut shifted = params.clone();
        shifted.step(1.0, &delta)?;
        let g2 = shifted.score_gradient(&s.states, &view.view(), &s.actions)?;
        let dn: f64 = delta.iter().map(|v| v.abs()).sum();
        if dn > 0.0 {
            lipschitz = lipschitz.max(l1(&g, &g2) / dn);
        }
    }
    fisher /= samples.max(1) as f64;
    let eig = fisher.symmetric_eigen().eigenvalues;
    Ok(FisherDiagnostics {
        min_eigenvalue: eig.iter().cloned().fold(f64::INFINITY, f64::min),
        max_eigenvalue: eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        max_score_norm: max_norm,
        score_lipschitz: lipschitz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::ClassWeights;
    use crate::env_model::BanditEnv;
    use crate::policy::PolicyArch;

    fn bandit(gamma: f64) -> (EnvSpec, PolicyParams, JointDist) {
        let env = EnvSpec::new(
            BanditEnv {
                nx: 1,
                nk: 1,
                arm_rewards: vec![0.2, 0.8],
            },
            gamma,
        )
        .unwrap();
        let arch = PolicyArch::new(Regime::Joint, env.dims(), false);
        let mu0 = JointDist::uniform(1, &ClassWeights::new(vec![1]).unwrap());
        (env, PolicyParams::zeros(arch), mu0)
    }

    #[test]
    fn bandit_converges_to_best_arm() {
        let (env, phi0, mu0) = bandit(0.0);
        let cfg = NpgConfig {
            eta: 20.0,
            alpha: 0.5,
            outer_iters: 10,
            inner_iters: 256,
            occupancy: OccupancyOptions::default(),
            value_tol: 1e-9,
            seed: 7,
        };
        let report = npg_train(&env, &phi0, &mu0, &cfg).unwrap();
        assert!((report.initial_value - 0.5).abs() < 1e-12);
        assert!(report.mean_value() > 0.79, "{}", report.mean_value());
    }

    #[test]
    fn resampled_advantage_is_centered_at_q_minus_v() {
        let (env, phi0, mu0) = bandit(0.0);
        let sampler = OccupancySampler::new(&env, &phi0, &mu0, OccupancyOptions::default()).unwrap();
        let mut rng = stream_rng(3, 0);
        let (mut sum, mut n) = ([0.0; 2], [0usize; 2]);
        for _ in 0..40_000 {
            let s = sampler.sample(&mut rng);
            sum[s.actions[0]] += s.advantage;
            n[s.actions[0]] += 1;
        }
        assert!((sum[0] / n[0] as f64 + 0.3).abs() < 0.03);
        assert!((sum[1] / n[1] as f64 - 0.3).abs() < 0.03);
    }

    #[test]
    fn cap_matches_mass_threshold() {
        assert_eq!(horizon_cap(0.0), 0);
        let c = horizon_cap(0.9);
        assert!(0.9f64.powi(c as i32) <= HORIZON_CAP_MASS);
        assert!(0.9f64.powi(c as i32 - 1) > HORIZON_CAP_MASS);
    }
}
