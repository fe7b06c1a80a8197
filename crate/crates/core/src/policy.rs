//! Population-dependent stochastic policies.
//!
//! A policy maps `(class, state, population view)` to a distribution over
//! actions. [`PolicyParams`] is a softmax policy whose logits are a tabular
//! term plus a linear function of the flattened population distribution.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{ClassDistCollection, ClassWeights, JointDist, MarginalDist, ProbVector};
use crate::env_model::{normalize_columns, Dims, Regime};
use crate::error::{MfcError, Result};

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before the softmax.
pub const LOGIT_CLAMP: f64 = 30.0;

/// The population information a policy reads.
#[derive(Clone, Copy, Debug)]
pub enum StateView<'a> {
    Joint(&'a JointDist),
    Class(&'a ClassDistCollection),
    Marginal(&'a MarginalDist),
}

impl StateView<'_> {
    pub fn regime(&self) -> Regime {
        match self {
            StateView::Joint(_) => Regime::Joint,
            StateView::Class(_) => Regime::Class,
            StateView::Marginal(_) => Regime::Marginal,
        }
    }

    /// Flattened distribution used as the feature vector.
    pub fn features(&self) -> &[f64] {
        match self {
            StateView::Joint(d) => d.as_slice(),
            StateView::Class(d) => d.as_slice(),
            StateView::Marginal(d) => d.as_slice(),
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            StateView::Joint(d) => d.shape(),
            StateView::Class(d) => d.shape(),
            StateView::Marginal(d) => d.shape(),
        }
    }
}

/// Owned counterpart of [`StateView`].
#[derive(Clone, Debug)]
pub enum OwnedView {
    Joint(JointDist),
    Class(ClassDistCollection),
    Marginal(MarginalDist),
}

impl OwnedView {
    pub fn view(&self) -> StateView<'_> {
        match self {
            OwnedView::Joint(d) => StateView::Joint(d),
            OwnedView::Class(d) => StateView::Class(d),
            OwnedView::Marginal(d) => StateView::Marginal(d),
        }
    }

    /// View of a joint state distribution in the given regime. Class views
    /// divide each class column by its mass.
    pub fn from_joint(regime: Regime, mu: &JointDist) -> Self {
        match regime {
            Regime::Joint => OwnedView::Joint(mu.clone()),
            Regime::Class => OwnedView::Class(normalize_columns(mu)),
            Regime::Marginal => OwnedView::Marginal(mu.marginal()),
        }
    }
}

/// A stochastic policy `π_k(x, ·)(u)`.
pub trait Policy: Send + Sync + fmt::Debug {
    fn dims(&self) -> Dims;
    fn regime(&self) -> Regime;
    /// Writes `π_k(x, view)` into `out` (length `nu`). Callers guarantee
    /// valid indices and a view matching [`Policy::regime`].
    fn action_probs_into(&self, k: usize, x: usize, view: &StateView<'_>, out: &mut [f64]);
    /// Lipschitz constant of `view -> π_k(x, view)` in L1, uniform in `(k, x)`.
    fn lipschitz_q(&self) -> Result<f64> {
        Err(MfcError::NoClosedForm(
            "policy does not provide a Lipschitz constant".into(),
        ))
    }

    fn check_view(&self, view: &StateView<'_>) -> Result<()> {
        if view.regime() != self.regime() {
            return Err(MfcError::RegimeError {
                expected: self.regime(),
                found: view.regime(),
            });
        }
        let d = self.dims();
        let want = if self.regime() == Regime::Marginal {
            (d.nx, 1)
        } else {
            (d.nx, d.nk)
        };
        if view.shape() != want {
            return Err(MfcError::ShapeError(format!(
                "view of shape {:?}, policy expects {want:?}",
                view.shape()
            )));
        }
        Ok(())
    }

    /// Checked evaluation of `π_k(x, view)`.
    fn evaluate(&self, k: usize, x: usize, view: &StateView<'_>) -> Result<MarginalDist> {
        let d = self.dims();
        for (i, b) in [(k, d.nk), (x, d.nx)] {
            if i >= b {
                return Err(MfcError::InvalidState { index: i, bound: b });
            }
        }
        self.check_view(view)?;
        let mut out = vec![0.0; d.nu];
        self.action_probs_into(k, x, view, &mut out);
        MarginalDist::new(out)
    }
}

/// All action distributions at a view, laid out `[k][x][u]`.
pub fn action_table(policy: &dyn Policy, view: &StateView<'_>) -> Result<Vec<f64>> {
    policy.check_view(view)?;
    let d = policy.dims();
    let mut table = vec![0.0; d.nk * d.nx * d.nu];
    for k in 0..d.nk {
        for x in 0..d.nx {
            let start = (k * d.nx + x) * d.nu;
            policy.action_probs_into(k, x, view, &mut table[start..start + d.nu]);
        }
    }
    Ok(table)
}

/// Layout of a softmax policy with logits linear in the population
/// features: `logit(k,x,u) = A[k,x,u] + Σ_f B[k,x,u,f] m_f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArch {
    pub regime: Regime,
    pub nk: usize,
    pub nx: usize,
    pub nu: usize,
    /// Without population features the policy is purely tabular.
    pub mu_features: bool,
}

impl PolicyArch {
    pub fn new(regime: Regime, dims: Dims, mu_features: bool) -> Self {
        PolicyArch {
            regime,
            nk: dims.nk,
            nx: dims.nx,
            nu: dims.nu,
            mu_features,
        }
    }

    pub fn n_features(&self) -> usize {
        if !self.mu_features {
            return 0;
        }
        match self.regime {
            Regime::Joint | Regime::Class => self.nx * self.nk,
            Regime::Marginal => self.nx,
        }
    }

    /// Parameter count `K |X| |U| (1 + F)`.
    pub fn dim(&self) -> usize {
        self.nk * self.nx * self.nu * (1 + self.n_features())
    }

    /// Offset of the `(k, x, u)` block; `A` sits at the offset, `B[.., f]`
    /// at `offset + 1 + f`.
    pub fn block(&self, k: usize, x: usize, u: usize) -> usize {
        ((k * self.nx + x) * self.nu + u) * (1 + self.n_features())
    }
}

/// Parameters `Φ` of a [`PolicyArch`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct PolicyParams {
    arch: PolicyArch,
    phi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRepr {
    arch: PolicyArch,
    phi: Vec<f64>,
}

impl TryFrom<ParamsRepr> for PolicyParams {
    type Error = MfcError;
    fn try_from(r: ParamsRepr) -> Result<Self> {
        PolicyParams::new(r.arch, r.phi)
    }
}

impl From<PolicyParams> for ParamsRepr {
    fn from(p: PolicyParams) -> Self {
        ParamsRepr {
            arch: p.arch,
            phi: p.phi,
        }
    }
}

impl PolicyParams {
    pub fn new(arch: PolicyArch, phi: Vec<f64>) -> Result<Self> {
        if arch.nk == 0 || arch.nx == 0 || arch.nu == 0 {
            return Err(MfcError::ShapeError(format!("degenerate policy {arch:?}")));
        }
        if phi.len() != arch.dim() {
            return Err(MfcError::ShapeError(format!(
                "{} parameters for an architecture of dimension {}",
                phi.len(),
                arch.dim()
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(MfcError::ShapeError("non-finite parameter".into()));
        }
        Ok(PolicyParams { arch, phi })
    }

    /// All-zero parameters, i.e. the uniform policy.
    pub fn zeros(arch: PolicyArch) -> Self {
        PolicyParams {
            arch,
            phi: vec![0.0; arch.dim()],
        }
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(arch: PolicyArch, scale: f64, rng: &mut R) -> Self {
        let phi = (0..arch.dim()).map(|_| rng.random_range(-scale..=scale)).collect();
        PolicyParams { arch, phi }
    }

    pub fn arch(&self) -> PolicyArch {
        self.arch
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// `Φ <- Φ + eta w`.
    pub fn step(&mut self, eta: f64, w: &[f64]) -> Result<()> {
        if w.len() != self.phi.len() {
            return Err(MfcError::ShapeError(format!(
                "direction of length {} for {} parameters",
                w.len(),
                self.phi.len()
            )));
        }
        for (p, d) in self.phi.iter_mut().zip(w) {
            *p += eta * d;
        }
        Ok(())
    }

    /// Unclamped logits of `π_k(x, m)`.
    fn raw_logits(&self, k: usize, x: usize, m: &[f64], out: &mut [f64]) {
        let a = &self.arch;
        let nf = a.n_features();
        for (u, z) in out.iter_mut().enumerate() {
            let b = a.block(k, x, u);
            let feat: f64 = self.phi[b + 1..b + 1 + nf].iter().zip(m).map(|(w, v)| w * v).sum();
            *z = self.phi[b] + feat;
        }
    }

    fn softmax_clamped(raw: &[f64], out: &mut [f64]) {
        let max = raw
            .iter()
            .map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, z) in out.iter_mut().zip(raw) {
            *o = (z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP) - max).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }

    fn features<'v>(&self, view: &'v StateView<'_>) -> &'v [f64] {
        if self.arch.mu_features {
            view.features()
        } else {
            &[]
        }
    }

    /// `Σ_k log π_k(x_k, view)(u_k)` for one representative per class.
    pub fn log_prob_sum(&self, xs: &[usize], view: &StateView<'_>, us: &[usize]) -> Result<f64> {
        self.check_representatives(xs, us)?;
        self.check_view(view)?;
        let m = self.features(view);
        let nu = self.arch.nu;
        let (mut raw, mut p) = (vec![0.0; nu], vec![0.0; nu]);
        let mut total = 0.0;
        for k in 0..self.arch.nk {
            self.raw_logits(k, xs[k], m, &mut raw);
            Self::softmax_clamped(&raw, &mut p);
            if p[us[k]] <= 0.0 {
                return Err(MfcError::ScoreUnderflow {
                    class: k,
                    state: xs[k],
                    action: us[k],
                });
            }
            total += p[us[k]].ln();
        }
        Ok(total)
    }

    /// Score `Σ_k ∇_Φ log π_k(x_k, view)(u_k)`. Coordinates whose logit is
    /// clamped have zero derivative.
    pub fn score_gradient(&self, xs: &[usize], view: &StateView<'_>, us: &[usize]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.arch.dim()];
        self.add_score_gradient(xs, view, us, &mut g)?;
        Ok(g)
    }

    /// Adds the score to `g` in place.
    pub fn add_score_gradient(&self, xs: &[usize], view: &StateView<'_>, us: &[usize], g: &mut [f64]) -> Result<()> {
        self.check_representatives(xs, us)?;
        self.check_view(view)?;
        let a = self.arch;
        let nf = a.n_features();
        let m = self.features(view);
        let (mut raw, mut p) = (vec![0.0; a.nu], vec![0.0; a.nu]);
        for k in 0..a.nk {
            let x = xs[k];
            self.raw_logits(k, x, m, &mut raw);
            Self::softmax_clamped(&raw, &mut p);
            if p[us[k]] <= 0.0 {
                return Err(MfcError::ScoreUnderflow {
                    class: k,
                    state: x,
                    action: us[k],
                });
            }
            for u in 0..a.nu {
                if raw[u].abs() > LOGIT_CLAMP {
                    continue;
                }
                let coef = if u == us[k] { 1.0 } else { 0.0 } - p[u];
                let b = a.block(k, x, u);
                g[b] += coef;
                for f in 0..nf {
                    g[b + 1 + f] += coef * m[f];
                }
            }
        }
        Ok(())
    }

    fn check_representatives(&self, xs: &[usize], us: &[usize]) -> Result<()> {
        let a = self.arch;
        if xs.len() != a.nk || us.len() != a.nk {
            return Err(MfcError::ShapeError(format!(
                "need one state and one action per class ({} classes)",
                a.nk
            )));
        }
        for (&x, &u) in xs.iter().zip(us) {
            if x >= a.nx {
                return Err(MfcError::InvalidState { index: x, bound: a.nx });
            }
            if u >= a.nu {
                return Err(MfcError::InvalidState { index: u, bound: a.nu });
            }
        }
        Ok(())
    }
}

impl Policy for PolicyParams {
    fn dims(&self) -> Dims {
        Dims {
            nx: self.arch.nx,
            nu: self.arch.nu,
            nk: self.arch.nk,
        }
    }

    fn regime(&self) -> Regime {
        self.arch.regime
    }

    fn action_probs_into(&self, k: usize, x: usize, view: &StateView<'_>, out: &mut [f64]) {
        let mut raw = vec![0.0; self.arch.nu];
        self.raw_logits(k, x, self.features(view), &mut raw);
        Self::softmax_clamped(&raw, out);
    }

    /// `max |B|`: the clamped softmax moves by at most the largest logit
    /// change in L1, and each logit changes by at most `max_f |B[.., f]|`
    /// times the L1 change of the features.
    fn lipschitz_q(&self) -> Result<f64> {
        let a = self.arch;
        let nf = a.n_features();
        let mut best: f64 = 0.0;
        for k in 0..a.nk {
            for x in 0..a.nx {
                for u in 0..a.nu {
                    let b = a.block(k, x, u);
                    for v in &self.phi[b + 1..b + 1 + nf] {
                        best = best.max(v.abs());
                    }
                }
            }
        }
        Ok(best)
    }
}

/// Population-independent policy given by a table `[k][x][u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPolicy {
    dims: Dims,
    regime: Regime,
    table: Vec<f64>,
}

impl FixedPolicy {
    pub fn new(dims: Dims, regime: Regime, table: Vec<f64>) -> Result<Self> {
        if table.len() != dims.nk * dims.nx * dims.nu {
            return Err(MfcError::ShapeError(format!(
                "policy table of length {} for {dims:?}",
                table.len()
            )));
        }
        let mut table = table;
        for row in table.chunks_mut(dims.nu) {
            let d = MarginalDist::new(row.to_vec())?;
            row.copy_from_slice(d.values());
        }
        Ok(FixedPolicy { dims, regime, table })
    }

    pub fn uniform(dims: Dims, regime: Regime) -> Self {
        FixedPolicy {
            dims,
            regime,
            table: vec![1.0 / dims.nu as f64; dims.nk * dims.nx * dims.nu],
        }
    }

    /// Deterministic policy choosing `actions[k * nx + x]`.
    pub fn deterministic(dims: Dims, regime: Regime, actions: &[usize]) -> Result<Self> {
        if actions.len() != dims.nk * dims.nx {
            return Err(MfcError::ShapeError("one action per (class, state) required".into()));
        }
        let mut table = vec![0.0; dims.nk * dims.nx * dims.nu];
        for (i, &u) in actions.iter().enumerate() {
            if u >= dims.nu {
                return Err(MfcError::InvalidState {
                    index: u,
                    bound: dims.nu,
                });
            }
            table[i * dims.nu + u] = 1.0;
        }
        Ok(FixedPolicy { dims, regime, table })
    }
}

impl Policy for FixedPolicy {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn regime(&self) -> Regime {
        self.regime
    }
    fn action_probs_into(&self, k: usize, x: usize, _: &StateView<'_>, out: &mut [f64]) {
        let start = (k * self.dims.nx + x) * self.dims.nu;
        out.copy_from_slice(&self.table[start..start + self.dims.nu]);
    }
    fn lipschitz_q(&self) -> Result<f64> {
        Ok(0.0)
    }
}

/// A class-regime policy read through joint views with fixed class
/// weights; the Lipschitz constant scales by `max_k 1/θ_k`.
#[derive(Clone, Debug)]
pub struct ClassAsJointPolicy {
    inner: Arc<dyn Policy>,
    weights: ClassWeights,
}

impl ClassAsJointPolicy {
    pub fn new(inner: Arc<dyn Policy>, weights: ClassWeights) -> Result<Self> {
        if inner.regime() != Regime::Class {
            return Err(MfcError::RegimeError {
                expected: Regime::Class,
                found: inner.regime(),
            });
        }
        if inner.dims().nk != weights.nk() {
            return Err(MfcError::ShapeError("class count differs from weights".into()));
        }
        Ok(ClassAsJointPolicy { inner, weights })
    }
}

impl Policy for ClassAsJointPolicy {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }
    fn regime(&self) -> Regime {
        Regime::Joint
    }
    fn action_probs_into(&self, k: usize, x: usize, view: &StateView<'_>, out: &mut [f64]) {
        let StateView::Joint(mu) = view else {
            panic!("joint policy called with a {:?} view", view.regime());
        };
        let bar = normalize_columns(mu);
        self.inner.action_probs_into(k, x, &StateView::Class(&bar), out)
    }
    fn lipschitz_q(&self) -> Result<f64> {
        Ok(self.inner.lipschitz_q()? * self.weights.theta_max_inv())
    }
}
