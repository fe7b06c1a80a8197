//! Finite-population simulation.
//!
//! Agents of class `k` act independently given the current empirical
//! distribution, collect rewards and move according to the class kernel.
//! Besides the per-agent simulator, estimators work on per-class state
//! counts: agents in the same class and state are exchangeable, so drawing
//! their actions and next states as multinomial counts has the same law as
//! drawing them one by one.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::{count_atoms, l1, sample_categorical, sample_multinomial, ClassWeights, JointDist};
use crate::env_model::{Dims, EnvSpec, OwnedArgs, Regime};
use crate::error::{MfcError, Result};
use crate::meanfield::truncation_horizon;
use crate::policy::{action_table, OwnedView, Policy};
use crate::stats::{stream_rng, McEstimate};

/// States of every agent, grouped by class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgentState {
    states: Vec<Vec<usize>>,
    nx: usize,
    #[serde(skip)]
    weights: ClassWeights,
}

impl AgentState {
    pub fn new(states: Vec<Vec<usize>>, nx: usize, weights: ClassWeights) -> Result<Self> {
        count_atoms(&states, nx, &weights)?;
        Ok(AgentState { states, nx, weights })
    }

    /// Agents placed by class counts `counts[k * nx + x]`, in state order.
    pub fn from_counts(counts: &[u64], nx: usize, weights: ClassWeights) -> Result<Self> {
        if counts.len() != nx * weights.nk() {
            return Err(MfcError::ShapeError("count vector does not match dimensions".into()));
        }
        let states = (0..weights.nk())
            .map(|k| {
                (0..nx)
                    .flat_map(|x| std::iter::repeat_n(x, counts[k * nx + x] as usize))
                    .collect()
            })
            .collect();
        Self::new(states, nx, weights)
    }

    /// Every agent drawn independently from its class row of `mu`.
    pub fn sample_from<R: Rng + ?Sized>(mu: &JointDist, weights: ClassWeights, rng: &mut R) -> Result<Self> {
        let bar = crate::distributions::joint_to_class(mu, &weights)?;
        let states = (0..weights.nk())
            .map(|k| {
                (0..weights.pops()[k])
                    .map(|_| sample_categorical(bar.row(k), rng))
                    .collect()
            })
            .collect();
        Self::new(states, mu.n(), weights)
    }

    pub fn states(&self) -> &[Vec<usize>] {
        &self.states
    }

    pub fn weights(&self) -> &ClassWeights {
        &self.weights
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    /// `counts[k * nx + x]`.
    pub fn counts(&self) -> Vec<u64> {
        count_atoms(&self.states, self.nx, &self.weights).expect("validated on construction")
    }

    pub fn empirical(&self) -> JointDist {
        JointDist::from_counts(self.nx, &self.weights, &self.counts()).expect("validated on construction")
    }
}

/// Result of one synchronous step of all agents.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
    pub next: AgentState,
    /// `(1/N) Σ_k Σ_j r`.
    pub mean_reward: f64,
}

/// `counts / N` laid out `[x * nk + k]`.
fn joint_values(counts: &[u64], n: usize, nk: usize, n_pop: f64) -> Vec<f64> {
    let mut v = vec![0.0; n * nk];
    for k in 0..nk {
        for x in 0..n {
            v[x * nk + k] = counts[k * n + x] as f64 / n_pop;
        }
    }
    v
}

fn check_compat(env: &EnvSpec, policy: &dyn Policy, nx: usize, weights: &ClassWeights) -> Result<Dims> {
    let d = env.dims();
    if policy.dims() != d || nx != d.nx || weights.nk() != d.nk {
        return Err(MfcError::ShapeError(format!(
            "env {d:?}, policy {:?}, population with {nx} states and {} classes",
            policy.dims(),
            weights.nk()
        )));
    }
    Ok(d)
}

/// Policy view of the empirical distribution given by `counts`.
fn view_from_counts(regime: Regime, d: Dims, weights: &ClassWeights, counts: &[u64]) -> Result<OwnedView> {
    Ok(match regime {
        Regime::Joint => OwnedView::Joint(JointDist::from_counts(d.nx, weights, counts)?),
        Regime::Marginal => OwnedView::Marginal(JointDist::from_counts(d.nx, weights, counts)?.marginal()),
        Regime::Class => OwnedView::Class(crate::distributions::ClassDistCollection::from_counts(
            d.nx, weights, counts,
        )?),
    })
}

/// One step of every agent, sampled agent by agent.
pub fn simulate_step<R: Rng + ?Sized>(
    env: &EnvSpec,
    policy: &dyn Policy,
    state: &AgentState,
    rng: &mut R,
) -> Result<StepOutcome> {
    let d = check_compat(env, policy, state.nx, &state.weights)?;
    let w = &state.weights;
    let counts = state.counts();
    let view = view_from_counts(policy.regime(), d, w, &counts)?;
    let table = action_table(policy, &view.view())?;
    let actions: Vec<Vec<usize>> = state
        .states
        .iter()
        .enumerate()
        .map(|(k, xs)| {
            xs.iter()
                .map(|&x| {
                    let s = (k * d.nx + x) * d.nu;
                    sample_categorical(&table[s..s + d.nu], rng)
                })
                .collect()
        })
        .collect();
    let a_counts = count_atoms(&actions, d.nu, w)?;
    let n_pop = w.n_pop() as f64;
    let args = OwnedArgs::from_joint_values(
        env.regime(),
        d,
        w,
        joint_values(&counts, d.nx, d.nk, n_pop),
        joint_values(&a_counts, d.nu, d.nk, n_pop),
    )?;
    let args = args.view();
    let model = env.model();
    let cells = d.nk * d.nx * d.nu;
    let mut reward_cache: Vec<Option<f64>> = vec![None; cells];
    let mut kernel_cache: Vec<Option<Vec<f64>>> = vec![None; cells];
    let mut rewards = Vec::with_capacity(d.nk);
    let mut next = Vec::with_capacity(d.nk);
    let mut total = 0.0;
    for k in 0..d.nk {
        let mut rk = Vec::with_capacity(state.states[k].len());
        let mut nk = Vec::with_capacity(state.states[k].len());
        for (&x, &u) in state.states[k].iter().zip(&actions[k]) {
            let c = (k * d.nx + x) * d.nu + u;
            let r = *reward_cache[c].get_or_insert_with(|| model.reward(k, x, u, &args));
            total += r;
            rk.push(r);
            let kernel = kernel_cache[c].get_or_insert_with(|| {
                let mut p = vec![0.0; d.nx];
                model.transition_into(k, x, u, &args, &mut p);
                p
            });
            nk.push(sample_categorical(kernel, rng));
        }
        rewards.push(rk);
        next.push(nk);
    }
    Ok(StepOutcome {
        actions,
        rewards,
        next: AgentState {
            states: next,
            nx: d.nx,
            weights: w.clone(),
        },
        mean_reward: total / n_pop,
    })
}

/// One recorded step of a simulated trajectory.
#[derive(Clone, Debug)]
pub struct SimPoint {
    pub states: Vec<Vec<usize>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<Vec<f64>>,
    pub mean_reward: f64,
}

/// Agent-level trajectory for `t = 0..=T`.
#[derive(Clone, Debug)]
pub struct SimTrajectory {
    pub points: Vec<SimPoint>,
}

impl SimTrajectory {
    /// One row per agent and time step: `t, class, agent, state, action, reward`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "class", "agent", "state", "action", "reward"])?;
        for (t, p) in self.points.iter().enumerate() {
            for (k, xs) in p.states.iter().enumerate() {
                for (j, &x) in xs.iter().enumerate() {
                    w.write_record([
                        t.to_string(),
                        k.to_string(),
                        j.to_string(),
                        x.to_string(),
                        p.actions[k][j].to_string(),
                        p.rewards[k][j].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulates `horizon + 1` steps agent by agent.
pub fn simulate<R: Rng + ?Sized>(
    env: &EnvSpec,
    policy: &dyn Policy,
    x0: &AgentState,
    horizon: usize,
    rng: &mut R,
) -> Result<SimTrajectory> {
    let mut points = Vec::with_capacity(horizon + 1);
    let mut state = x0.clone();
    for _ in 0..=horizon {
        let out = simulate_step(env, policy, &state, rng)?;
        points.push(SimPoint {
            states: state.states,
            actions: out.actions,
            rewards: out.rewards,
            mean_reward: out.mean_reward,
        });
        state = out.next;
    }
    Ok(SimTrajectory { points })
}

/// Count-level simulator shared by the estimators.
struct CountSim<'a> {
    env: &'a EnvSpec,
    policy: &'a dyn Policy,
    weights: &'a ClassWeights,
    d: Dims,
    n_pop: f64,
}

/// Everything one count-level step produces.
struct CountStep {
    /// `a[(k * nx + x) * nu + u]`.
    action_counts: Vec<u64>,
    /// `ν^N` as joint values `[u * nk + k]`.
    nu_n: Vec<f64>,
    /// `ν^MF(μ^N)` as joint values `[u * nk + k]`.
    nu_mf: Vec<f64>,
    /// Realised `(1/N) Σ r`.
    reward_n: f64,
    /// `Σ_k r_k^MF(μ^N)`.
    reward_mf: f64,
    /// Next counts `[k * nx + x]`.
    next_counts: Vec<u64>,
    /// `P^MF(μ^N)` as joint values `[x * nk + k]`.
    next_mf: Vec<f64>,
}

impl<'a> CountSim<'a> {
    fn new(env: &'a EnvSpec, policy: &'a dyn Policy, nx: usize, weights: &'a ClassWeights) -> Result<Self> {
        let d = check_compat(env, policy, nx, weights)?;
        Ok(CountSim {
            env,
            policy,
            weights,
            d,
            n_pop: weights.n_pop() as f64,
        })
    }

    /// Samples actions and next states. Mean-field comparison quantities
    /// are computed only when `with_mf` is set.
    fn step<R: Rng + ?Sized>(&self, counts: &[u64], with_mf: bool, rng: &mut R) -> Result<CountStep> {
        let d = self.d;
        let w = self.weights;
        let view = view_from_counts(self.policy.regime(), d, w, counts)?;
        let table = action_table(self.policy, &view.view())?;
        let mut action_counts = vec![0u64; d.nk * d.nx * d.nu];
        let mut nu_n = vec![0.0; d.nu * d.nk];
        let mut nu_mf = vec![0.0; d.nu * d.nk];
        for k in 0..d.nk {
            for x in 0..d.nx {
                let c = counts[k * d.nx + x];
                let s = (k * d.nx + x) * d.nu;
                let probs = &table[s..s + d.nu];
                if with_mf {
                    for u in 0..d.nu {
                        nu_mf[u * d.nk + k] += probs[u] * c as f64 / self.n_pop;
                    }
                }
                if c == 0 {
                    continue;
                }
                sample_multinomial(c, probs, rng, &mut action_counts[s..s + d.nu]);
                for u in 0..d.nu {
                    nu_n[u * d.nk + k] += action_counts[s + u] as f64 / self.n_pop;
                }
            }
        }
        let mu_vals = joint_values(counts, d.nx, d.nk, self.n_pop);
        let regime = self.env.regime();
        let args_n = OwnedArgs::from_joint_values(regime, d, w, mu_vals.clone(), nu_n.clone())?;
        let args_n = args_n.view();
        let model = self.env.model();
        let mut kernel = vec![0.0; d.nx];
        let mut next_counts = vec![0u64; d.nk * d.nx];
        let mut draw = vec![0u64; d.nx];
        let mut reward_sum = 0.0;
        for k in 0..d.nk {
            for x in 0..d.nx {
                for u in 0..d.nu {
                    let a = action_counts[(k * d.nx + x) * d.nu + u];
                    if a == 0 {
                        continue;
                    }
                    reward_sum += a as f64 * model.reward(k, x, u, &args_n);
                    model.transition_into(k, x, u, &args_n, &mut kernel);
                    sample_multinomial(a, &kernel, rng, &mut draw);
                    for y in 0..d.nx {
                        next_counts[k * d.nx + y] += draw[y];
                    }
                }
            }
        }
        let (mut reward_mf, mut next_mf) = (0.0, vec![0.0; d.nx * d.nk]);
        if with_mf {
            let args_mf = OwnedArgs::from_joint_values(regime, d, w, mu_vals, nu_mf.clone())?;
            let args_mf = args_mf.view();
            for k in 0..d.nk {
                for x in 0..d.nx {
                    let m = counts[k * d.nx + x] as f64 / self.n_pop;
                    if m == 0.0 {
                        continue;
                    }
                    for u in 0..d.nu {
                        let p = m * table[(k * d.nx + x) * d.nu + u];
                        if p == 0.0 {
                            continue;
                        }
                        reward_mf += p * model.reward(k, x, u, &args_mf);
                        model.transition_into(k, x, u, &args_mf, &mut kernel);
                        for y in 0..d.nx {
                            next_mf[y * d.nk + k] += p * kernel[y];
                        }
                    }
                }
            }
        }
        Ok(CountStep {
            action_counts,
            nu_n,
            nu_mf,
            reward_n: reward_sum / self.n_pop,
            reward_mf,
            next_counts,
            next_mf,
        })
    }

    /// Distance between two joint-scale vectors `[atom * nk + k]` in the
    /// metric of `metric`.
    fn distance(&self, metric: Regime, n: usize, a: &[f64], b: &[f64]) -> f64 {
        let nk = self.d.nk;
        match metric {
            Regime::Joint => l1(a, b),
            Regime::Class => {
                let theta = self.weights.theta();
                (0..n)
                    .flat_map(|x| (0..nk).map(move |k| (x, k)))
                    .map(|(x, k)| (a[x * nk + k] - b[x * nk + k]).abs() / theta[k])
                    .sum()
            }
            Regime::Marginal => (0..n)
                .map(|x| {
                    let s: f64 = (0..nk).map(|k| a[x * nk + k] - b[x * nk + k]).sum();
                    s.abs()
                })
                .sum(),
        }
    }
}

/// Discounted per-capita returns `Σ_{t≤T} γ^t (1/N) Σ r`, one per
/// replication, replication `r` using stream `r` of `seed`.
pub fn discounted_returns(
    env: &EnvSpec,
    policy: &dyn Policy,
    x0: &AgentState,
    reps: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let sim = CountSim::new(env, policy, x0.nx, &x0.weights)?;
    let c0 = x0.counts();
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let mut counts = c0.clone();
            let mut value = 0.0;
            let mut disc = 1.0;
            for _ in 0..=horizon {
                let step = sim.step(&counts, false, &mut rng)?;
                value += disc * step.reward_n;
                disc *= env.gamma();
                counts = step.next_counts;
            }
            Ok(value)
        })
        .collect()
}

/// Estimate of the finite-population value `E Σ_t γ^t (1/N) Σ r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub estimate: McEstimate,
    pub horizon: usize,
    /// Upper bound on the truncated tail `M_R γ^(T+1) / (1-γ)`.
    pub tail_bound: f64,
}

/// [`discounted_returns`] summarised, with the horizon chosen so that the
/// truncated tail is below `tol`.
pub fn v_n_estimate(
    env: &EnvSpec,
    policy: &dyn Policy,
    x0: &AgentState,
    reps: usize,
    tol: f64,
    seed: u64,
) -> Result<ValueEstimate> {
    let m_r = env.constants().m_r;
    let horizon = truncation_horizon(env.gamma(), m_r, tol)?;
    v_n_estimate_fixed(env, policy, x0, reps, horizon, seed)
}

/// [`discounted_returns`] summarised at a fixed horizon.
pub fn v_n_estimate_fixed(
    env: &EnvSpec,
    policy: &dyn Policy,
    x0: &AgentState,
    reps: usize,
    horizon: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    let returns = discounted_returns(env, policy, x0, reps, horizon, seed)?;
    let g = env.gamma();
    Ok(ValueEstimate {
        estimate: McEstimate::from_samples(&returns),
        horizon,
        tail_bound: env.constants().m_r * g.powi(horizon as i32 + 1) / (1.0 - g),
    })
}

/// Which one-step deviation to estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    /// `|ν^N - ν^MF(μ^N)|`.
    Action,
    /// `|(1/N) Σ r - Σ_k r_k^MF(μ^N)|`.
    Reward,
    /// `|μ^N_{t+1} - P^MF(μ^N)|`.
    State,
}

/// Monte-Carlo estimate of a one-step deviation from the configuration
/// `config`, with distances measured in the metric of `metric` (joint L1,
/// sum of per-class L1, or L1 of the marginals). Trial `i` uses stream `i`
/// of `seed`.
pub fn deviation_estimate(
    env: &EnvSpec,
    policy: &dyn Policy,
    config: &AgentState,
    kind: DeviationKind,
    metric: Regime,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    let sim = CountSim::new(env, policy, config.nx, &config.weights)?;
    let counts = config.counts();
    let d = sim.d;
    let n_pop = sim.n_pop;
    let samples: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let s = sim.step(&counts, true, &mut rng)?;
            Ok(match kind {
                DeviationKind::Action => sim.distance(metric, d.nu, &s.nu_n, &s.nu_mf),
                DeviationKind::Reward => (s.reward_n - s.reward_mf).abs(),
                DeviationKind::State => {
                    let next = joint_values(&s.next_counts, d.nx, d.nk, n_pop);
                    sim.distance(metric, d.nx, &next, &s.next_mf)
                }
            })
        })
        .collect::<Result<_>>()?;
    Ok(McEstimate::from_samples(&samples))
}

/// `E |ν^N - ν^MF(μ^N)|` in the metric of the model's regime.
pub fn deviation_nu(
    env: &EnvSpec,
    policy: &dyn Policy,
    config: &AgentState,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    deviation_estimate(env, policy, config, DeviationKind::Action, env.regime(), trials, seed)
}

/// `E |(1/N) Σ r - Σ_k r_k^MF(μ^N)|`.
pub fn deviation_reward(
    env: &EnvSpec,
    policy: &dyn Policy,
    config: &AgentState,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    deviation_estimate(env, policy, config, DeviationKind::Reward, env.regime(), trials, seed)
}

/// `E |μ^N_{t+1} - P^MF(μ^N)|` in the metric of the model's regime.
pub fn deviation_mu(
    env: &EnvSpec,
    policy: &dyn Policy,
    config: &AgentState,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    deviation_estimate(env, policy, config, DeviationKind::State, env.regime(), trials, seed)
}

/// Per-cell action counts of one count-level step, exposed for
/// distributional tests of the count-level sampler.
pub fn sample_action_counts<R: Rng + ?Sized>(
    env: &EnvSpec,
    policy: &dyn Policy,
    config: &AgentState,
    rng: &mut R,
) -> Result<Vec<u64>> {
    let sim = CountSim::new(env, policy, config.nx, &config.weights)?;
    Ok(sim.step(&config.counts(), false, rng)?.action_counts)
}

/// Instance of the weighted Bernoulli deviation inequality
/// `Σ_s Σ_m E|Σ_n C_{m,n}(s) (X_{m,n} - E X_{m,n})| ≤ C √(M N S)`, where
/// `X_{m,n}` are Bernoulli with `Σ_m E X_{m,n} = 1`, independent across `n`,
/// and `|C_{m,n}|_1 ≤ C`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BernoulliInstance {
    pub m: usize,
    pub n: usize,
    pub s: usize,
    pub c_bound: f64,
    /// `p[m * n_count + n]`.
    pub probs: Vec<f64>,
    /// `C[(m * n_count + n) * s + s']`.
    pub coeffs: Vec<f64>,
}

impl BernoulliInstance {
    pub fn new(m: usize, n: usize, s: usize, c_bound: f64, probs: Vec<f64>, coeffs: Vec<f64>) -> Result<Self> {
        if m == 0 || n == 0 || s == 0 {
            return Err(MfcError::InvalidInstance("empty dimension".into()));
        }
        if probs.len() != m * n || coeffs.len() != m * n * s {
            return Err(MfcError::InvalidInstance("table sizes do not match M, N, S".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(MfcError::InvalidInstance("probability outside [0, 1]".into()));
        }
        for j in 0..n {
            let col: f64 = (0..m).map(|i| probs[i * n + j]).sum();
            if (col - 1.0).abs() > 1e-9 {
                return Err(MfcError::InvalidInstance(format!(
                    "probabilities of index {j} sum to {col}, not one"
                )));
            }
        }
        for (cell, c) in coeffs.chunks(s).enumerate() {
            let norm: f64 = c.iter().map(|v| v.abs()).sum();
            if norm > c_bound * (1.0 + 1e-12) {
                return Err(MfcError::InvalidInstance(format!(
                    "coefficient {cell} has L1 norm {norm} above {c_bound}"
                )));
            }
        }
        Ok(BernoulliInstance {
            m,
            n,
            s,
            c_bound,
            probs,
            coeffs,
        })
    }

    /// Random instance: each column of probabilities uniform on the simplex,
    /// each coefficient vector of L1 norm exactly `c_bound`.
    pub fn random<R: Rng + ?Sized>(m: usize, n: usize, s: usize, c_bound: f64, rng: &mut R) -> Result<Self> {
        let mut probs = vec![0.0; m * n];
        for j in 0..n {
            let col = crate::distributions::sample_simplex(m, rng);
            for i in 0..m {
                probs[i * n + j] = col[i];
            }
        }
        let mut coeffs = Vec::with_capacity(m * n * s);
        for _ in 0..m * n {
            let v: Vec<f64> = (0..s).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm: f64 = v.iter().map(|x: &f64| x.abs()).sum::<f64>().max(1e-300);
            coeffs.extend(v.iter().map(|x| x * c_bound / norm));
        }
        Self::new(m, n, s, c_bound, probs, coeffs)
    }

    pub fn rhs(&self) -> f64 {
        self.c_bound * ((self.m * self.n * self.s) as f64).sqrt()
    }

    fn coeff(&self, i: usize, j: usize, s: usize) -> f64 {
        self.coeffs[(i * self.n + j) * self.s + s]
    }

    /// Exact left-hand side by enumerating the `2^N` outcomes of each row.
    pub fn lhs_exact(&self) -> Result<f64> {
        if self.n > 20 {
            return Err(MfcError::InvalidInstance(
                "too many Bernoulli variables to enumerate".into(),
            ));
        }
        let mut total = 0.0;
        for i in 0..self.m {
            for mask in 0u32..(1u32 << self.n) {
                let mut prob = 1.0;
                for j in 0..self.n {
                    let p = self.probs[i * self.n + j];
                    prob *= if mask >> j & 1 == 1 { p } else { 1.0 - p };
                }
                if prob == 0.0 {
                    continue;
                }
                for s in 0..self.s {
                    let dev: f64 = (0..self.n)
                        .map(|j| {
                            let xj = (mask >> j & 1) as f64;
                            self.coeff(i, j, s) * (xj - self.probs[i * self.n + j])
                        })
                        .sum();
                    total += prob * dev.abs();
                }
            }
        }
        Ok(total)
    }

    /// Monte-Carlo left-hand side. Each trial draws the categorical choice
    /// of every index `n`, which gives Bernoulli marginals with the required
    /// column sums.
    pub fn lhs_mc<R: Rng + ?Sized>(&self, trials: usize, rng: &mut R) -> McEstimate {
        let mut col = vec![0.0; self.m];
        let samples: Vec<f64> = (0..trials)
            .map(|_| {
                let mut choice = vec![0usize; self.n];
                for (j, c) in choice.iter_mut().enumerate() {
                    for (i, v) in col.iter_mut().enumerate() {
                        *v = self.probs[i * self.n + j];
                    }
                    *c = sample_categorical(&col, rng);
                }
                let mut total = 0.0;
                for i in 0..self.m {
                    for s in 0..self.s {
                        let dev: f64 = (0..self.n)
                            .map(|j| {
                                let xj = if choice[j] == i { 1.0 } else { 0.0 };
                                self.coeff(i, j, s) * (xj - self.probs[i * self.n + j])
                            })
                            .sum();
                        total += dev.abs();
                    }
                }
                total
            })
            .collect();
        McEstimate::from_samples(&samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_model::ConstantEnv;
    use crate::policy::FixedPolicy;

    #[test]
    fn constant_env_returns_are_deterministic() {
        let dims = Dims { nx: 2, nu: 3, nk: 2 };
        let env = EnvSpec::new(ConstantEnv { dims, value: 1.5 }, 0.5).unwrap();
        let pol = FixedPolicy::uniform(dims, Regime::Joint);
        let w = ClassWeights::new(vec![3, 2]).unwrap();
        let x0 = AgentState::new(vec![vec![0, 1, 1], vec![0, 0]], 2, w).unwrap();
        let v = v_n_estimate_fixed(&env, &pol, &x0, 10, 3, 1).unwrap();
        let exact = 1.5 * (1.0 + 0.5 + 0.25 + 0.125);
        assert!((v.estimate.mean - exact).abs() < 1e-12);
        assert_eq!(v.estimate.stderr, 0.0);
    }

    #[test]
    fn bernoulli_validation() {
        assert!(matches!(
            BernoulliInstance::new(2, 1, 1, 1.0, vec![0.5, 0.4], vec![1.0, 1.0]),
            Err(MfcError::InvalidInstance(_))
        ));
        assert!(matches!(
            BernoulliInstance::new(2, 1, 1, 1.0, vec![0.5, 0.5], vec![2.0, 1.0]),
            Err(MfcError::InvalidInstance(_))
        ));
    }

    #[test]
    fn bernoulli_exact_single_variable() {
        // One Bernoulli(p) with coefficient 1: E|X - p| = 2 p (1 - p).
        let inst = BernoulliInstance::new(1, 1, 1, 1.0, vec![1.0], vec![1.0]).unwrap();
        assert_eq!(inst.lhs_exact().unwrap(), 0.0);
        let inst = BernoulliInstance::new(2, 1, 1, 1.0, vec![0.3, 0.7], vec![1.0, 1.0]).unwrap();
        let want = 2.0 * (2.0 * 0.3 * 0.7);
        assert!((inst.lhs_exact().unwrap() - want).abs() < 1e-15);
    }
}
