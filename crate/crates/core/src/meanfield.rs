//! Deterministic mean-field propagation of the population distribution.
//!
//! The joint maps act on a [`JointDist`] and serve joint- and
//! marginal-regime models; the barred maps act on a
//! [`ClassDistCollection`] and serve class-regime models.

use std::io::Write;

use serde::Serialize;

use crate::distributions::{joint_to_class, ClassDistCollection, ClassWeights, JointDist, ProbVector};
use crate::env_model::{EnvSpec, Regime, RegimeArgs};
use crate::error::{MfcError, Result};
use crate::policy::{action_table, OwnedView, Policy, StateView};

/// One application of the mean-field maps at `μ`.
#[derive(Clone, Debug)]
pub struct MfStep {
    /// `ν^MF(μ)` over `(action, class)`.
    pub nu: JointDist,
    /// `P^MF(μ)`.
    pub next: JointDist,
    /// `r_k^MF(μ)` per class (carries the class mass).
    pub rewards: Vec<f64>,
}

/// Barred counterpart of [`MfStep`].
#[derive(Clone, Debug)]
pub struct MfStepBar {
    pub nu: ClassDistCollection,
    pub next: ClassDistCollection,
    /// `r̄_k^MF(μ̄)` per class (per-capita within the class).
    pub rewards: Vec<f64>,
}

/// Truncated infinite-horizon value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MfValue {
    pub value: f64,
    /// Last time index included in the sum.
    pub horizon: usize,
}

/// Smallest `T` with `bound γ^(T+1) / (1-γ) < tol`.
pub fn truncation_horizon(gamma: f64, bound: f64, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(MfcError::ConfigError(format!("tolerance {tol} must be positive")));
    }
    if gamma == 0.0 || bound == 0.0 {
        return Ok(0);
    }
    let mut t = 0usize;
    let mut tail = bound * gamma / (1.0 - gamma);
    while tail >= tol {
        t += 1;
        tail *= gamma;
    }
    Ok(t)
}

fn check_joint_route(env: &EnvSpec, policy: &dyn Policy, mu: &JointDist) -> Result<()> {
    for r in [env.regime(), policy.regime()] {
        if r == Regime::Class {
            return Err(MfcError::RegimeError {
                expected: Regime::Joint,
                found: Regime::Class,
            });
        }
    }
    let (d, pd) = (env.dims(), policy.dims());
    if d != pd || mu.shape() != (d.nx, d.nk) {
        return Err(MfcError::ShapeError(format!(
            "env {d:?}, policy {pd:?}, distribution {:?}",
            mu.shape()
        )));
    }
    Ok(())
}

/// `ν^MF`, `P^MF` and `r^MF` at `μ` in one pass.
pub fn mf_step(env: &EnvSpec, policy: &dyn Policy, mu: &JointDist) -> Result<MfStep> {
    check_joint_route(env, policy, mu)?;
    let d = env.dims();
    let view = OwnedView::from_joint(policy.regime(), mu);
    let table = action_table(policy, &view.view())?;
    let pi = |k: usize, x: usize, u: usize| table[(k * d.nx + x) * d.nu + u];

    let mut nu_vals = vec![0.0; d.nu * d.nk];
    for k in 0..d.nk {
        for x in 0..d.nx {
            let m = mu.get(x, k);
            for u in 0..d.nu {
                nu_vals[u * d.nk + k] += pi(k, x, u) * m;
            }
        }
    }
    let nu = JointDist::new(d.nu, d.nk, nu_vals)?;

    let (mu_m, nu_m);
    let args = match env.regime() {
        Regime::Joint => RegimeArgs::Joint { mu, nu: &nu },
        _ => {
            mu_m = mu.marginal();
            nu_m = nu.marginal();
            RegimeArgs::Marginal { mu: &mu_m, nu: &nu_m }
        }
    };
    let model = env.model();
    let mut rewards = vec![0.0; d.nk];
    let mut next = vec![0.0; d.nx * d.nk];
    let mut kernel = vec![0.0; d.nx];
    for k in 0..d.nk {
        for x in 0..d.nx {
            let m = mu.get(x, k);
            if m == 0.0 {
                continue;
            }
            for u in 0..d.nu {
                let w = m * pi(k, x, u);
                if w == 0.0 {
                    continue;
                }
                rewards[k] += w * model.reward(k, x, u, &args);
                model.transition_into(k, x, u, &args, &mut kernel);
                for (y, p) in kernel.iter().enumerate() {
                    next[y * d.nk + k] += w * p;
                }
            }
        }
    }
    Ok(MfStep {
        nu,
        next: JointDist::new(d.nx, d.nk, next)?,
        rewards,
    })
}

/// `ν^MF(μ)`: `ν(u,k) = Σ_x π_k(x,μ)(u) μ(x,k)`.
pub fn nu_mf(env: &EnvSpec, policy: &dyn Policy, mu: &JointDist) -> Result<JointDist> {
    Ok(mf_step(env, policy, mu)?.nu)
}

/// `P^MF(μ)`.
pub fn p_mf(env: &EnvSpec, policy: &dyn Policy, mu: &JointDist) -> Result<JointDist> {
    Ok(mf_step(env, policy, mu)?.next)
}

/// `r_k^MF(μ)` for every class.
pub fn r_mf(env: &EnvSpec, policy: &dyn Policy, mu: &JointDist) -> Result<Vec<f64>> {
    Ok(mf_step(env, policy, mu)?.rewards)
}

/// `v^MF(μ_0) = Σ_k Σ_t γ^t r_k^MF(μ_t)`, truncated where
/// `K M_R γ^(T+1) / (1-γ) < tol`.
pub fn v_mf(env: &EnvSpec, policy: &dyn Policy, mu0: &JointDist, tol: f64) -> Result<MfValue> {
    let d = env.dims();
    let horizon = truncation_horizon(env.gamma(), d.nk as f64 * env.constants().m_r, tol)?;
    let mut mu = mu0.clone();
    let mut value = 0.0;
    let mut disc = 1.0;
    for t in 0..=horizon {
        let step = mf_step(env, policy, &mu)?;
        value += disc * step.rewards.iter().sum::<f64>();
        disc *= env.gamma();
        if t < horizon {
            mu = step.next;
        }
    }
    Ok(MfValue { value, horizon })
}

fn check_class_route(env: &EnvSpec, policy: &dyn Policy, mu: &ClassDistCollection) -> Result<()> {
    for r in [env.regime(), policy.regime()] {
        if r != Regime::Class {
            return Err(MfcError::RegimeError {
                expected: Regime::Class,
                found: r,
            });
        }
    }
    let (d, pd) = (env.dims(), policy.dims());
    if d != pd || mu.shape() != (d.nx, d.nk) {
        return Err(MfcError::ShapeError(format!(
            "env {d:?}, policy {pd:?}, collection {:?}",
            mu.shape()
        )));
    }
    Ok(())
}

/// Barred maps `ν̄^MF`, `P̄^MF`, `r̄^MF` at `μ̄` in one pass.
pub fn mf_step_bar(env: &EnvSpec, policy: &dyn Policy, mu: &ClassDistCollection) -> Result<MfStepBar> {
    check_class_route(env, policy, mu)?;
    let d = env.dims();
    let table = action_table(policy, &StateView::Class(mu))?;
    let pi = |k: usize, x: usize, u: usize| table[(k * d.nx + x) * d.nu + u];

    let mut nu_rows = vec![0.0; d.nu * d.nk];
    for k in 0..d.nk {
        for x in 0..d.nx {
            for u in 0..d.nu {
                nu_rows[k * d.nu + u] += pi(k, x, u) * mu.get(x, k);
            }
        }
    }
    let nu = ClassDistCollection::new(d.nu, d.nk, nu_rows)?;
    let args = RegimeArgs::Class { mu, nu: &nu };
    let model = env.model();
    let mut rewards = vec![0.0; d.nk];
    let mut next = vec![0.0; d.nx * d.nk];
    let mut kernel = vec![0.0; d.nx];
    for k in 0..d.nk {
        for x in 0..d.nx {
            let m = mu.get(x, k);
            if m == 0.0 {
                continue;
            }
            for u in 0..d.nu {
                let w = m * pi(k, x, u);
                if w == 0.0 {
                    continue;
                }
                rewards[k] += w * model.reward(k, x, u, &args);
                model.transition_into(k, x, u, &args, &mut kernel);
                for (y, p) in kernel.iter().enumerate() {
                    next[k * d.nx + y] += w * p;
                }
            }
        }
    }
    Ok(MfStepBar {
        nu,
        next: ClassDistCollection::new(d.nx, d.nk, next)?,
        rewards,
    })
}

pub fn nu_mf_bar(env: &EnvSpec, policy: &dyn Policy, mu: &ClassDistCollection) -> Result<ClassDistCollection> {
    Ok(mf_step_bar(env, policy, mu)?.nu)
}

pub fn p_mf_bar(env: &EnvSpec, policy: &dyn Policy, mu: &ClassDistCollection) -> Result<ClassDistCollection> {
    Ok(mf_step_bar(env, policy, mu)?.next)
}

pub fn r_mf_bar(env: &EnvSpec, policy: &dyn Policy, mu: &ClassDistCollection) -> Result<Vec<f64>> {
    Ok(mf_step_bar(env, policy, mu)?.rewards)
}

/// `v̄^MF(μ̄_0) = Σ_k θ_k Σ_t γ^t r̄_k^MF(μ̄_t)`, truncated where
/// `K M_R γ^(T+1) / (1-γ) < tol`.
pub fn v_mf_bar(
    env: &EnvSpec,
    policy: &dyn Policy,
    mu0: &ClassDistCollection,
    weights: &ClassWeights,
    tol: f64,
) -> Result<MfValue> {
    let d = env.dims();
    if weights.nk() != d.nk {
        return Err(MfcError::ShapeError("class weights do not match the model".into()));
    }
    let horizon = truncation_horizon(env.gamma(), d.nk as f64 * env.constants().m_r, tol)?;
    let mut mu = mu0.clone();
    let mut value = 0.0;
    let mut disc = 1.0;
    for t in 0..=horizon {
        let step = mf_step_bar(env, policy, &mu)?;
        let r: f64 = step.rewards.iter().zip(weights.theta()).map(|(r, t)| r * t).sum();
        value += disc * r;
        disc *= env.gamma();
        if t < horizon {
            mu = step.next;
        }
    }
    Ok(MfValue { value, horizon })
}

/// Mean-field value for a model of any regime, starting from a joint
/// distribution whose class masses equal `weights`.
pub fn value_in_regime(
    env: &EnvSpec,
    policy: &dyn Policy,
    mu0: &JointDist,
    weights: &ClassWeights,
    tol: f64,
) -> Result<MfValue> {
    mu0.check_weights(weights)?;
    match env.regime() {
        Regime::Class => v_mf_bar(env, policy, &joint_to_class(mu0, weights)?, weights, tol),
        _ => v_mf(env, policy, mu0, tol),
    }
}

/// State, action distribution and per-class rewards at one time step.
#[derive(Clone, Debug)]
pub struct MfPoint<D> {
    pub mu: D,
    pub nu: D,
    pub rewards: Vec<f64>,
}

/// Mean-field trajectory `t = 0..=T`.
#[derive(Clone, Debug)]
pub struct MFTrajectory<D> {
    pub points: Vec<MfPoint<D>>,
}

impl<D: ProbVector> MFTrajectory<D> {
    /// One row per time step: `t`, the flattened `μ_t`, the flattened `ν_t`
    /// and the per-class rewards.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let Some(first) = self.points.first() else {
            w.flush()?;
            return Ok(());
        };
        let mut header = vec!["t".to_string()];
        header.extend((0..first.mu.as_slice().len()).map(|i| format!("mu_{i}")));
        header.extend((0..first.nu.as_slice().len()).map(|i| format!("nu_{i}")));
        header.extend((0..first.rewards.len()).map(|k| format!("r_{k}")));
        w.write_record(&header)?;
        for (t, p) in self.points.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(p.mu.as_slice().iter().map(|v| v.to_string()));
            row.extend(p.nu.as_slice().iter().map(|v| v.to_string()));
            row.extend(p.rewards.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Joint mean-field trajectory for `horizon + 1` steps.
pub fn mf_rollout(
    env: &EnvSpec,
    policy: &dyn Policy,
    mu0: &JointDist,
    horizon: usize,
) -> Result<MFTrajectory<JointDist>> {
    let mut points = Vec::with_capacity(horizon + 1);
    let mut mu = mu0.clone();
    for _ in 0..=horizon {
        let step = mf_step(env, policy, &mu)?;
        points.push(MfPoint {
            mu,
            nu: step.nu,
            rewards: step.rewards,
        });
        mu = step.next;
    }
    Ok(MFTrajectory { points })
}

/// Barred mean-field trajectory for `horizon + 1` steps.
pub fn mf_rollout_bar(
    env: &EnvSpec,
    policy: &dyn Policy,
    mu0: &ClassDistCollection,
    horizon: usize,
) -> Result<MFTrajectory<ClassDistCollection>> {
    let mut points = Vec::with_capacity(horizon + 1);
    let mut mu = mu0.clone();
    for _ in 0..=horizon {
        let step = mf_step_bar(env, policy, &mu)?;
        points.push(MfPoint {
            mu,
            nu: step.nu,
            rewards: step.rewards,
        });
        mu = step.next;
    }
    Ok(MFTrajectory { points })
}
