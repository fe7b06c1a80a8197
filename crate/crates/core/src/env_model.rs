//! Environment models: per-class rewards and transition kernels that may
//! depend on the population state and the population action.
//!
//! An environment lives in one of three regimes, which fixes what it reads
//! from the population: the joint `(state, class)` and `(action, class)`
//! distributions, the per-class distributions, or the class-free marginals.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{
    random_class_collection, random_joint, random_marginal, ClassDistCollection, ClassWeights, JointDist, MarginalDist,
    ProbVector,
};
use crate::error::{MfcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Joint,
    Class,
    Marginal,
}

/// Population arguments handed to rewards and kernels.
#[derive(Clone, Copy, Debug)]
pub enum RegimeArgs<'a> {
    Joint {
        mu: &'a JointDist,
        nu: &'a JointDist,
    },
    Class {
        mu: &'a ClassDistCollection,
        nu: &'a ClassDistCollection,
    },
    Marginal {
        mu: &'a MarginalDist,
        nu: &'a MarginalDist,
    },
}

impl RegimeArgs<'_> {
    pub fn regime(&self) -> Regime {
        match self {
            RegimeArgs::Joint { .. } => Regime::Joint,
            RegimeArgs::Class { .. } => Regime::Class,
            RegimeArgs::Marginal { .. } => Regime::Marginal,
        }
    }

    /// L1 distance between two argument pairs, `|μ-μ'| + |ν-ν'|`.
    pub fn distance(&self, other: &RegimeArgs<'_>) -> Result<f64> {
        use crate::distributions::l1_distance;
        match (self, other) {
            (RegimeArgs::Joint { mu, nu }, RegimeArgs::Joint { mu: m2, nu: n2 }) => {
                Ok(l1_distance(*mu, *m2)? + l1_distance(*nu, *n2)?)
            }
            (RegimeArgs::Class { mu, nu }, RegimeArgs::Class { mu: m2, nu: n2 }) => {
                Ok(l1_distance(*mu, *m2)? + l1_distance(*nu, *n2)?)
            }
            (RegimeArgs::Marginal { mu, nu }, RegimeArgs::Marginal { mu: m2, nu: n2 }) => {
                Ok(l1_distance(*mu, *m2)? + l1_distance(*nu, *n2)?)
            }
            _ => Err(MfcError::RegimeError {
                expected: self.regime(),
                found: other.regime(),
            }),
        }
    }

    fn joint(&self) -> (&JointDist, &JointDist) {
        match self {
            RegimeArgs::Joint { mu, nu } => (mu, nu),
            _ => panic!("joint-regime model called with {:?} arguments", self.regime()),
        }
    }

    fn class(&self) -> (&ClassDistCollection, &ClassDistCollection) {
        match self {
            RegimeArgs::Class { mu, nu } => (mu, nu),
            _ => panic!("class-regime model called with {:?} arguments", self.regime()),
        }
    }

    fn marginal(&self) -> (&MarginalDist, &MarginalDist) {
        match self {
            RegimeArgs::Marginal { mu, nu } => (mu, nu),
            _ => panic!("marginal-regime model called with {:?} arguments", self.regime()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub nu: usize,
    pub nk: usize,
}

/// Reward bound and Lipschitz constants of a model, measured in the metric
/// of its own regime.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConstants {
    pub m_r: f64,
    pub l_r: f64,
    pub l_p: f64,
}

/// A reward function and transition kernel per class.
///
/// Callers guarantee that indices are in range and that `args` matches
/// [`EnvModel::regime`] and [`EnvModel::dims`]; [`EnvSpec`] performs those
/// checks for external callers.
pub trait EnvModel: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn dims(&self) -> Dims;
    fn regime(&self) -> Regime;
    fn constants(&self) -> LipschitzConstants;
    fn reward(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>) -> f64;
    /// Writes the next-state distribution into `out` (length `nx`).
    fn transition_into(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>, out: &mut [f64]);
}

/// A model together with its discount factor.
#[derive(Clone, Debug)]
pub struct EnvSpec {
    gamma: f64,
    model: Arc<dyn EnvModel>,
}

impl EnvSpec {
    pub fn new<M: EnvModel + 'static>(model: M, gamma: f64) -> Result<Self> {
        Self::from_arc(Arc::new(model), gamma)
    }

    pub fn from_arc(model: Arc<dyn EnvModel>, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(MfcError::InvalidDiscount(gamma));
        }
        let d = model.dims();
        if d.nx == 0 || d.nu == 0 || d.nk == 0 {
            return Err(MfcError::ShapeError(format!("degenerate dimensions {d:?}")));
        }
        Ok(EnvSpec { gamma, model })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn model(&self) -> &Arc<dyn EnvModel> {
        &self.model
    }

    pub fn dims(&self) -> Dims {
        self.model.dims()
    }

    pub fn regime(&self) -> Regime {
        self.model.regime()
    }

    pub fn constants(&self) -> LipschitzConstants {
        self.model.constants()
    }

    pub fn name(&self) -> String {
        self.model.name()
    }

    /// Same model under a different discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::from_arc(self.model.clone(), gamma)
    }

    pub fn check_args(&self, args: &RegimeArgs<'_>) -> Result<()> {
        let d = self.dims();
        if args.regime() != self.regime() {
            return Err(MfcError::RegimeError {
                expected: self.regime(),
                found: args.regime(),
            });
        }
        let shapes = match args {
            RegimeArgs::Joint { mu, nu } => (mu.shape(), nu.shape()),
            RegimeArgs::Class { mu, nu } => (mu.shape(), nu.shape()),
            RegimeArgs::Marginal { mu, nu } => (mu.shape(), nu.shape()),
        };
        let want_k = if self.regime() == Regime::Marginal { 1 } else { d.nk };
        if shapes != ((d.nx, want_k), (d.nu, want_k)) {
            return Err(MfcError::ShapeError(format!(
                "arguments of shape {shapes:?} for dimensions {d:?}"
            )));
        }
        Ok(())
    }

    fn check_indices(&self, k: usize, x: usize, u: usize) -> Result<()> {
        let d = self.dims();
        for (i, b) in [(k, d.nk), (x, d.nx), (u, d.nu)] {
            if i >= b {
                return Err(MfcError::InvalidState { index: i, bound: b });
            }
        }
        Ok(())
    }

    pub fn reward(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>) -> Result<f64> {
        self.check_indices(k, x, u)?;
        self.check_args(args)?;
        Ok(self.model.reward(k, x, u, args))
    }

    pub fn transition(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>) -> Result<MarginalDist> {
        self.check_indices(k, x, u)?;
        self.check_args(args)?;
        let mut out = vec![0.0; self.dims().nx];
        self.model.transition_into(k, x, u, args, &mut out);
        MarginalDist::new(out)
    }

    pub fn transition_sample<R: Rng + ?Sized>(
        &self,
        k: usize,
        x: usize,
        u: usize,
        args: &RegimeArgs<'_>,
        rng: &mut R,
    ) -> Result<usize> {
        Ok(self.transition(k, x, u, args)?.sample(rng))
    }
}

/// Which quantity [`estimate_lipschitz`] probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LipschitzField {
    /// `sup |r|`.
    RewardBound,
    /// `sup |r(a) - r(b)| / d(a, b)`.
    Reward,
    /// `sup |P(a) - P(b)|_1 / d(a, b)`.
    Transition,
}

/// Owned counterpart of [`RegimeArgs`].
#[derive(Clone, Debug)]
pub enum OwnedArgs {
    Joint(JointDist, JointDist),
    Class(ClassDistCollection, ClassDistCollection),
    Marginal(MarginalDist, MarginalDist),
}

impl OwnedArgs {
    pub fn view(&self) -> RegimeArgs<'_> {
        match self {
            OwnedArgs::Joint(mu, nu) => RegimeArgs::Joint { mu, nu },
            OwnedArgs::Class(mu, nu) => RegimeArgs::Class { mu, nu },
            OwnedArgs::Marginal(mu, nu) => RegimeArgs::Marginal { mu, nu },
        }
    }

    /// Arguments in `regime` built from joint-scale state values
    /// `states[x * nk + k]` and action values `actions[u * nk + k]` whose
    /// class masses equal `weights`.
    pub fn from_joint_values(
        regime: Regime,
        d: Dims,
        weights: &ClassWeights,
        states: Vec<f64>,
        actions: Vec<f64>,
    ) -> Result<Self> {
        let mu = JointDist::new(d.nx, d.nk, states)?;
        let nu = JointDist::new(d.nu, d.nk, actions)?;
        Ok(match regime {
            Regime::Joint => OwnedArgs::Joint(mu, nu),
            Regime::Marginal => OwnedArgs::Marginal(mu.marginal(), nu.marginal()),
            Regime::Class => OwnedArgs::Class(per_class(&mu, weights)?, per_class(&nu, weights)?),
        })
    }

    fn random<R: Rng + ?Sized>(regime: Regime, d: Dims, rng: &mut R) -> Self {
        match regime {
            Regime::Joint => OwnedArgs::Joint(random_joint(d.nx, d.nk, rng), random_joint(d.nu, d.nk, rng)),
            Regime::Class => OwnedArgs::Class(
                random_class_collection(d.nx, d.nk, rng),
                random_class_collection(d.nu, d.nk, rng),
            ),
            Regime::Marginal => OwnedArgs::Marginal(random_marginal(d.nx, rng), random_marginal(d.nu, rng)),
        }
    }

    fn slices(&self) -> (&[f64], &[f64]) {
        match self {
            OwnedArgs::Joint(a, b) => (a.as_slice(), b.as_slice()),
            OwnedArgs::Class(a, b) => (a.as_slice(), b.as_slice()),
            OwnedArgs::Marginal(a, b) => (a.as_slice(), b.as_slice()),
        }
    }

    /// Convex combination `(1-eps) self + eps other`.
    fn mix(&self, other: &OwnedArgs, eps: f64, d: Dims) -> Self {
        let blend =
            |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (1.0 - eps) * x + eps * y).collect() };
        let (ma, na) = self.slices();
        let (mb, nb) = other.slices();
        let (m, n) = (blend(ma, mb), blend(na, nb));
        match self {
            OwnedArgs::Joint(..) => OwnedArgs::Joint(
                JointDist::new(d.nx, d.nk, m).expect("mixture of distributions"),
                JointDist::new(d.nu, d.nk, n).expect("mixture of distributions"),
            ),
            OwnedArgs::Class(..) => OwnedArgs::Class(
                ClassDistCollection::new(d.nx, d.nk, m).expect("mixture of distributions"),
                ClassDistCollection::new(d.nu, d.nk, n).expect("mixture of distributions"),
            ),
            OwnedArgs::Marginal(..) => OwnedArgs::Marginal(
                MarginalDist::new(m).expect("mixture of distributions"),
                MarginalDist::new(n).expect("mixture of distributions"),
            ),
        }
    }
}

/// Monte-Carlo lower estimate of a model constant from uniformly drawn
/// argument pairs. Half of the pairs are nearby points (a random point
/// mixed slightly towards another); pairs closer than `1e-12` are skipped.
pub fn estimate_lipschitz<R: Rng + ?Sized>(env: &EnvSpec, field: LipschitzField, samples: usize, rng: &mut R) -> f64 {
    let d = env.dims();
    let regime = env.regime();
    let model = env.model();
    let mut best: f64 = 0.0;
    let mut pa = vec![0.0; d.nx];
    let mut pb = vec![0.0; d.nx];
    for i in 0..samples {
        let k = rng.random_range(0..d.nk);
        let x = rng.random_range(0..d.nx);
        let u = rng.random_range(0..d.nu);
        let a = OwnedArgs::random(regime, d, rng);
        if field == LipschitzField::RewardBound {
            best = best.max(model.reward(k, x, u, &a.view()).abs());
            continue;
        }
        let c = OwnedArgs::random(regime, d, rng);
        let b = if i % 2 == 0 {
            c
        } else {
            let eps = 10f64.powi(-rng.random_range(1..4));
            a.mix(&c, eps, d)
        };
        let denom = a.view().distance(&b.view()).expect("same regime");
        if denom < 1e-12 {
            continue;
        }
        let num = match field {
            LipschitzField::Reward => (model.reward(k, x, u, &a.view()) - model.reward(k, x, u, &b.view())).abs(),
            LipschitzField::Transition => {
                model.transition_into(k, x, u, &a.view(), &mut pa);
                model.transition_into(k, x, u, &b.view(), &mut pb);
                crate::distributions::l1(&pa, &pb)
            }
            LipschitzField::RewardBound => unreachable!(),
        };
        best = best.max(num / denom);
    }
    best
}

/// `d(·,k) / θ_k` without the compatibility check of
/// [`crate::distributions::joint_to_class`].
fn per_class(d: &JointDist, weights: &ClassWeights) -> Result<ClassDistCollection> {
    let (n, nk) = (d.n(), d.nk());
    let mut rows = vec![0.0; n * nk];
    for k in 0..nk {
        let t = weights.theta()[k];
        for x in 0..n {
            rows[k * n + x] = d.get(x, k) / t;
        }
    }
    ClassDistCollection::new(n, nk, rows)
}

fn check_prob(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(MfcError::ConfigError(format!("{name} = {v} is not in [0, 1]")))
    }
}

fn check_len(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() == len {
        Ok(())
    } else {
        Err(MfcError::ShapeError(format!(
            "{name} has {} entries, expected {len}",
            v.len()
        )))
    }
}

fn check_kernel(kernel: &[f64], nx: usize) -> Result<()> {
    for row in kernel.chunks(nx) {
        MarginalDist::new(row.to_vec())?;
    }
    Ok(())
}

/// Reward table in `[0, 1]` indexed `[k][x][u]`, varying with all indices.
pub fn default_base_reward(nk: usize, nx: usize, nu: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(nk * nx * nu);
    for k in 0..nk {
        for x in 0..nx {
            for u in 0..nu {
                let phase = 1.0 + 1.3 * k as f64 + 0.7 * x as f64 + 2.1 * u as f64;
                out.push(0.5 + 0.5 * phase.sin());
            }
        }
    }
    out
}

/// Kernel indexed `[k][x][u][x']` that moves to `(x + u + k) mod nx` with
/// probability 0.6 and otherwise to a uniform state.
pub fn default_base_kernel(nk: usize, nx: usize, nu: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(nk * nx * nu * nx);
    for k in 0..nk {
        for x in 0..nx {
            for u in 0..nu {
                let target = (x + u + k) % nx;
                for y in 0..nx {
                    let hit = if y == target { 0.6 } else { 0.0 };
                    out.push(hit + 0.4 / nx as f64);
                }
            }
        }
    }
    out
}

/// Reward `c` everywhere; every agent stays where it is.
#[derive(Clone, Debug)]
pub struct ConstantEnv {
    pub dims: Dims,
    pub value: f64,
}

impl EnvModel for ConstantEnv {
    fn name(&self) -> String {
        "constant".into()
    }
    fn dims(&self) -> Dims {
        self.dims
    }
    fn regime(&self) -> Regime {
        Regime::Joint
    }
    fn constants(&self) -> LipschitzConstants {
        LipschitzConstants {
            m_r: self.value.abs(),
            l_r: 0.0,
            l_p: 0.0,
        }
    }
    fn reward(&self, _: usize, _: usize, _: usize, _: &RegimeArgs<'_>) -> f64 {
        self.value
    }
    fn transition_into(&self, _: usize, x: usize, _: usize, _: &RegimeArgs<'_>, out: &mut [f64]) {
        out.iter_mut().for_each(|p| *p = 0.0);
        out[x] = 1.0;
    }
}

/// Next state uniform regardless of anything; reward `1[u = 0]`.
#[derive(Clone, Debug)]
pub struct UniformEnv {
    pub dims: Dims,
}

impl UniformEnv {
    /// One state, 32 actions.
    pub fn action_setup(nk: usize) -> Self {
        UniformEnv {
            dims: Dims { nx: 1, nu: 32, nk },
        }
    }

    /// 32 states, one action.
    pub fn state_setup(nk: usize) -> Self {
        UniformEnv {
            dims: Dims { nx: 32, nu: 1, nk },
        }
    }
}

impl EnvModel for UniformEnv {
    fn name(&self) -> String {
        "uniform".into()
    }
    fn dims(&self) -> Dims {
        self.dims
    }
    fn regime(&self) -> Regime {
        Regime::Joint
    }
    fn constants(&self) -> LipschitzConstants {
        LipschitzConstants {
            m_r: 1.0,
            l_r: 0.0,
            l_p: 0.0,
        }
    }
    fn reward(&self, _: usize, _: usize, u: usize, _: &RegimeArgs<'_>) -> f64 {
        if u == 0 {
            1.0
        } else {
            0.0
        }
    }
    fn transition_into(&self, _: usize, _: usize, _: usize, _: &RegimeArgs<'_>, out: &mut [f64]) {
        let p = 1.0 / out.len() as f64;
        out.iter_mut().for_each(|v| *v = p);
    }
}

/// Deterministic cycle `x -> x + 1 mod nx`; reward `1[x = 0]`.
#[derive(Clone, Debug)]
pub struct CycleEnv {
    pub dims: Dims,
}

impl EnvModel for CycleEnv {
    fn name(&self) -> String {
        "cycle".into()
    }
    fn dims(&self) -> Dims {
        self.dims
    }
    fn regime(&self) -> Regime {
        Regime::Joint
    }
    fn constants(&self) -> LipschitzConstants {
        LipschitzConstants {
            m_r: 1.0,
            l_r: 0.0,
            l_p: 0.0,
        }
    }
    fn reward(&self, _: usize, x: usize, _: usize, _: &RegimeArgs<'_>) -> f64 {
        if x == 0 {
            1.0
        } else {
            0.0
        }
    }
    fn transition_into(&self, _: usize, x: usize, _: usize, _: &RegimeArgs<'_>, out: &mut [f64]) {
        out.iter_mut().for_each(|p| *p = 0.0);
        out[(x + 1) % out.len()] = 1.0;
    }
}

/// Reward depends only on the action; agents never move.
#[derive(Clone, Debug)]
pub struct BanditEnv {
    pub nx: usize,
    pub nk: usize,
    pub arm_rewards: Vec<f64>,
}

impl EnvModel for BanditEnv {
    fn name(&self) -> String {
        "bandit".into()
    }
    fn dims(&self) -> Dims {
        Dims {
            nx: self.nx,
            nu: self.arm_rewards.len(),
            nk: self.nk,
        }
    }
    fn regime(&self) -> Regime {
        Regime::Joint
    }
    fn constants(&self) -> LipschitzConstants {
        LipschitzConstants {
            m_r: self.arm_rewards.iter().fold(0.0, |m, r| m.max(r.abs())),
            l_r: 0.0,
            l_p: 0.0,
        }
    }
    fn reward(&self, _: usize, _: usize, u: usize, _: &RegimeArgs<'_>) -> f64 {
        self.arm_rewards[u]
    }
    fn transition_into(&self, _: usize, x: usize, _: usize, _: &RegimeArgs<'_>, out: &mut [f64]) {
        out.iter_mut().for_each(|p| *p = 0.0);
        out[x] = 1.0;
    }
}

/// `(1 - m(x')) / (nx - 1)`: pushes agents towards less crowded states.
fn anti_crowding(m: &[f64], out: &mut [f64]) {
    let denom = (m.len() - 1) as f64;
    for (o, v) in out.iter_mut().zip(m) {
        *o = (1.0 - v) / denom;
    }
}

fn mix_kernel(base: &[f64], crowd: &[f64], lambda: f64, out: &mut [f64]) {
    for ((o, b), c) in out.iter_mut().zip(base).zip(crowd) {
        *o = (1.0 - lambda) * b + lambda * c;
    }
}

/// Shared parameters of the congestion models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CongestionParams {
    pub nx: usize,
    pub nu: usize,
    pub nk: usize,
    /// Congestion cost `b_k` per class.
    pub cost: Vec<f64>,
    /// Weight of the crowding kernel in the transition mixture.
    pub mixing: f64,
    /// `w[k][k']` in `[0, 1]`; defaults to all ones. Ignored by the
    /// marginal model.
    #[serde(default)]
    pub interaction: Option<Vec<f64>>,
    /// `[k][x][u]` table; defaults to [`default_base_reward`].
    #[serde(default)]
    pub base_reward: Option<Vec<f64>>,
    /// `[k][x][u][x']` table; defaults to [`default_base_kernel`].
    #[serde(default)]
    pub base_kernel: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct CongestionTables {
    dims: Dims,
    cost: Vec<f64>,
    mixing: f64,
    interaction: Vec<f64>,
    base_reward: Vec<f64>,
    base_kernel: Vec<f64>,
}

impl CongestionTables {
    fn new(p: &CongestionParams) -> Result<Self> {
        let dims = Dims {
            nx: p.nx,
            nu: p.nu,
            nk: p.nk,
        };
        if p.nx < 2 || p.nu == 0 || p.nk == 0 {
            return Err(MfcError::ConfigError(
                "congestion models need at least two states, one action and one class".into(),
            ));
        }
        check_len("cost", &p.cost, p.nk)?;
        check_prob("mixing", p.mixing)?;
        let interaction = p.interaction.clone().unwrap_or_else(|| vec![1.0; p.nk * p.nk]);
        check_len("interaction", &interaction, p.nk * p.nk)?;
        for &w in &interaction {
            check_prob("interaction weight", w)?;
        }
        let base_reward = p
            .base_reward
            .clone()
            .unwrap_or_else(|| default_base_reward(p.nk, p.nx, p.nu));
        check_len("base_reward", &base_reward, p.nk * p.nx * p.nu)?;
        let base_kernel = p
            .base_kernel
            .clone()
            .unwrap_or_else(|| default_base_kernel(p.nk, p.nx, p.nu));
        check_len("base_kernel", &base_kernel, p.nk * p.nx * p.nu * p.nx)?;
        check_kernel(&base_kernel, p.nx)?;
        Ok(CongestionTables {
            dims,
            cost: p.cost.clone(),
            mixing: p.mixing,
            interaction,
            base_reward,
            base_kernel,
        })
    }

    fn base(&self, k: usize, x: usize, u: usize) -> f64 {
        let d = self.dims;
        self.base_reward[(k * d.nx + x) * d.nu + u]
    }

    fn kernel(&self, k: usize, x: usize, u: usize) -> &[f64] {
        let d = self.dims;
        let start = ((k * d.nx + x) * d.nu + u) * d.nx;
        &self.base_kernel[start..start + d.nx]
    }

    fn max_base(&self, k: usize) -> f64 {
        let d = self.dims;
        self.base_reward[k * d.nx * d.nu..(k + 1) * d.nx * d.nu]
            .iter()
            .fold(0.0, |m, r| m.max(r.abs()))
    }

    fn l_p(&self) -> f64 {
        self.mixing / (self.dims.nx - 1) as f64
    }
}

/// Joint-regime congestion: `r_k = base_k(x,u) - b_k Σ_k' w_kk' ν(u,k')`,
/// transitions mix a fixed kernel with a kernel that avoids crowded states.
#[derive(Clone, Debug)]
pub struct CongestionEnv {
    t: CongestionTables,
}

impl CongestionEnv {
    pub fn new(params: &CongestionParams) -> Result<Self> {
        Ok(CongestionEnv {
            t: CongestionTables::new(params)?,
        })
    }

    fn max_weight(&self, k: usize) -> f64 {
        let nk = self.t.dims.nk;
        self.t.interaction[k * nk..(k + 1) * nk]
            .iter()
            .fold(0.0, |m, &w| m.max(w))
    }
}

impl EnvModel for CongestionEnv {
    fn name(&self) -> String {
        "congestion".into()
    }
    fn dims(&self) -> Dims {
        self.t.dims
    }
    fn regime(&self) -> Regime {
        Regime::Joint
    }
    fn constants(&self) -> LipschitzConstants {
        let nk = self.t.dims.nk;
        let m_r = (0..nk)
            .map(|k| self.t.max_base(k) + self.t.cost[k].abs() * self.max_weight(k))
            .fold(0.0, f64::max);
        let l_r = (0..nk)
            .map(|k| self.t.cost[k].abs() * self.max_weight(k))
            .fold(0.0, f64::max);
        LipschitzConstants {
            m_r,
            l_r,
            l_p: self.t.l_p(),
        }
    }
    fn reward(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>) -> f64 {
        let (_, nu) = args.joint();
        let nk = self.t.dims.nk;
        let load: f64 = (0..nk).map(|j| self.t.interaction[k * nk + j] * nu.get(u, j)).sum();
        self.t.base(k, x, u) - self.t.cost[k] * load
    }
    fn transition_into(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>, out: &mut [f64]) {
        let (mu, _) = args.joint();
        let mut crowd = vec![0.0; out.len()];
        anti_crowding(mu.marginal().values(), &mut crowd);
        mix_kernel(self.t.kernel(k, x, u), &crowd, self.t.mixing, out);
    }
}

/// Marginal-regime congestion: `r_k = base_k(x,u) - b_k ν[U](u)`; the
/// crowding kernel reads the state marginal.
#[derive(Clone, Debug)]
pub struct MarginalCongestionEnv {
    t: CongestionTables,
}

impl MarginalCongestionEnv {
    pub fn new(params: &CongestionParams) -> Result<Self> {
        Ok(MarginalCongestionEnv {
            t: CongestionTables::new(params)?,
        })
    }
}

impl EnvModel for MarginalCongestionEnv {
    fn name(&self) -> String {
        "marginal_congestion".into()
    }
    fn dims(&self) -> Dims {
        self.t.dims
    }
    fn regime(&self) -> Regime {
        Regime::Marginal
    }
    fn constants(&self) -> LipschitzConstants {
        let nk = self.t.dims.nk;
        let m_r = (0..nk)
            .map(|k| self.t.max_base(k) + self.t.cost[k].abs())
            .fold(0.0, f64::max);
        let l_r = self.t.cost.iter().fold(0.0, |m: f64, c| m.max(c.abs()));
        LipschitzConstants {
            m_r,
            l_r,
            l_p: self.t.l_p(),
        }
    }
    fn reward(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>) -> f64 {
        let (_, nu) = args.marginal();
        self.t.base(k, x, u) - self.t.cost[k] * nu.get(u)
    }
    fn transition_into(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>, out: &mut [f64]) {
        let (mu, _) = args.marginal();
        let mut crowd = vec![0.0; out.len()];
        anti_crowding(mu.values(), &mut crowd);
        mix_kernel(self.t.kernel(k, x, u), &crowd, self.t.mixing, out);
    }
}

/// Parameters of the two-state epidemic model. States are `0 = susceptible`,
/// `1 = infected`; actions are `0 = protect`, `1 = expose`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SisParams {
    pub nk: usize,
    /// `c[k][k']`, non-negative with row sums at most one.
    pub contact: Vec<f64>,
    /// Infection rate multiplier per action.
    pub beta: [f64; 2],
    pub recovery: Vec<f64>,
    pub infection_cost: Vec<f64>,
    pub protection_cost: Vec<f64>,
    /// Cost per unit of infection pressure, paid by everyone.
    pub pressure_cost: Vec<f64>,
}

impl SisParams {
    /// Two classes with stronger within-class contact.
    pub fn two_class() -> Self {
        SisParams {
            nk: 2,
            contact: vec![0.6, 0.3, 0.3, 0.6],
            beta: [0.2, 0.9],
            recovery: vec![0.3, 0.4],
            infection_cost: vec![1.0, 1.5],
            protection_cost: vec![0.3, 0.2],
            pressure_cost: vec![0.2, 0.2],
        }
    }
}

/// Class-regime SIS epidemic. Infection pressure on class `k` is
/// `Σ_k' c_kk' μ̄(I, k')`; a susceptible agent taking action `u` is
/// infected with probability `β_u` times the pressure.
#[derive(Clone, Debug)]
pub struct SisEpidemicEnv {
    p: SisParams,
}

impl SisEpidemicEnv {
    pub fn new(p: SisParams) -> Result<Self> {
        let nk = p.nk;
        if nk == 0 {
            return Err(MfcError::ConfigError("epidemic model needs a class".into()));
        }
        check_len("contact", &p.contact, nk * nk)?;
        for name_vec in [
            ("recovery", &p.recovery),
            ("infection_cost", &p.infection_cost),
            ("protection_cost", &p.protection_cost),
            ("pressure_cost", &p.pressure_cost),
        ] {
            check_len(name_vec.0, name_vec.1, nk)?;
        }
        for &r in &p.recovery {
            check_prob("recovery", r)?;
        }
        for &b in &p.beta {
            check_prob("beta", b)?;
        }
        for k in 0..nk {
            let row = &p.contact[k * nk..(k + 1) * nk];
            if row.iter().any(|&c| c < 0.0) || row.iter().sum::<f64>() > 1.0 + 1e-12 {
                return Err(MfcError::ConfigError(format!(
                    "contact row {k} must be non-negative with sum at most one"
                )));
            }
        }
        for c in p
            .infection_cost
            .iter()
            .chain(&p.protection_cost)
            .chain(&p.pressure_cost)
        {
            if *c < 0.0 {
                return Err(MfcError::ConfigError("costs must be non-negative".into()));
            }
        }
        Ok(SisEpidemicEnv { p })
    }

    fn pressure(&self, k: usize, mu: &ClassDistCollection) -> f64 {
        let nk = self.p.nk;
        (0..nk).map(|j| self.p.contact[k * nk + j] * mu.get(1, j)).sum()
    }

    fn max_contact(&self) -> f64 {
        self.p.contact.iter().fold(0.0, |m, &c| m.max(c))
    }
}

impl EnvModel for SisEpidemicEnv {
    fn name(&self) -> String {
        "sis_epidemic".into()
    }
    fn dims(&self) -> Dims {
        Dims {
            nx: 2,
            nu: 2,
            nk: self.p.nk,
        }
    }
    fn regime(&self) -> Regime {
        Regime::Class
    }
    fn constants(&self) -> LipschitzConstants {
        let nk = self.p.nk;
        let m_r = (0..nk)
            .map(|k| {
                let row_sum: f64 = self.p.contact[k * nk..(k + 1) * nk].iter().sum();
                self.p.infection_cost[k] + self.p.protection_cost[k] + self.p.pressure_cost[k] * row_sum
            })
            .fold(0.0, f64::max);
        let s_max = self.p.pressure_cost.iter().fold(0.0, |m: f64, &s| m.max(s));
        let beta_max = self.p.beta[0].max(self.p.beta[1]);
        LipschitzConstants {
            m_r,
            l_r: s_max * self.max_contact() / 2.0,
            l_p: beta_max * self.max_contact(),
        }
    }
    fn reward(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>) -> f64 {
        let (mu, _) = args.class();
        let mut r = -self.p.pressure_cost[k] * self.pressure(k, mu);
        if x == 1 {
            r -= self.p.infection_cost[k];
        }
        if u == 0 {
            r -= self.p.protection_cost[k];
        }
        r
    }
    fn transition_into(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>, out: &mut [f64]) {
        let (mu, _) = args.class();
        if x == 0 {
            let p = (self.p.beta[u] * self.pressure(k, mu)).clamp(0.0, 1.0);
            out[0] = 1.0 - p;
            out[1] = p;
        } else {
            out[0] = self.p.recovery[k];
            out[1] = 1.0 - self.p.recovery[k];
        }
    }
}

/// A class-regime model read through joint arguments with fixed class
/// weights. Per-class rows are recovered by dividing each class column by
/// its mass, which equals `θ_k` on inputs compatible with the weights.
/// Declared constants scale the class constants by `max_k 1/θ_k`.
#[derive(Clone, Debug)]
pub struct ClassAsJointEnv {
    inner: Arc<dyn EnvModel>,
    weights: ClassWeights,
}

impl ClassAsJointEnv {
    pub fn new(inner: Arc<dyn EnvModel>, weights: ClassWeights) -> Result<Self> {
        if inner.regime() != Regime::Class {
            return Err(MfcError::RegimeError {
                expected: Regime::Class,
                found: inner.regime(),
            });
        }
        if inner.dims().nk != weights.nk() {
            return Err(MfcError::ShapeError("class count differs from weights".into()));
        }
        Ok(ClassAsJointEnv { inner, weights })
    }
}

/// Rows `d(·,k) / Σ_x d(x,k)`, uniform for an empty class.
pub fn normalize_columns(d: &JointDist) -> ClassDistCollection {
    let (n, nk) = (d.n(), d.nk());
    let mut rows = vec![0.0; n * nk];
    for k in 0..nk {
        let m = d.class_mass(k);
        for x in 0..n {
            rows[k * n + x] = if m > 0.0 { d.get(x, k) / m } else { 1.0 / n as f64 };
        }
    }
    ClassDistCollection::new(n, nk, rows).expect("normalised columns")
}

impl EnvModel for ClassAsJointEnv {
    fn name(&self) -> String {
        format!("{}_as_joint", self.inner.name())
    }
    fn dims(&self) -> Dims {
        self.inner.dims()
    }
    fn regime(&self) -> Regime {
        Regime::Joint
    }
    fn constants(&self) -> LipschitzConstants {
        let c = self.inner.constants();
        let t = self.weights.theta_max_inv();
        LipschitzConstants {
            m_r: c.m_r,
            l_r: c.l_r * t,
            l_p: c.l_p * t,
        }
    }
    fn reward(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>) -> f64 {
        let (mu, nu) = args.joint();
        let (mb, nb) = (normalize_columns(mu), normalize_columns(nu));
        self.inner.reward(k, x, u, &RegimeArgs::Class { mu: &mb, nu: &nb })
    }
    fn transition_into(&self, k: usize, x: usize, u: usize, args: &RegimeArgs<'_>, out: &mut [f64]) {
        let (mu, nu) = args.joint();
        let (mb, nb) = (normalize_columns(mu), normalize_columns(nu));
        self.inner
            .transition_into(k, x, u, &RegimeArgs::Class { mu: &mb, nu: &nb }, out)
    }
}

/// Built-in models selectable from configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum BuiltinEnv {
    Constant {
        nx: usize,
        nu: usize,
        nk: usize,
        value: f64,
    },
    Uniform {
        nx: usize,
        nu: usize,
        nk: usize,
    },
    Cycle {
        nx: usize,
        nu: usize,
        nk: usize,
    },
    Bandit {
        nx: usize,
        nk: usize,
        arm_rewards: Vec<f64>,
    },
    Congestion(CongestionParams),
    MarginalCongestion(CongestionParams),
    SisEpidemic(SisParams),
}

impl BuiltinEnv {
    pub fn build(&self, gamma: f64) -> Result<EnvSpec> {
        match self {
            BuiltinEnv::Constant { nx, nu, nk, value } => EnvSpec::new(
                ConstantEnv {
                    dims: Dims {
                        nx: *nx,
                        nu: *nu,
                        nk: *nk,
                    },
                    value: *value,
                },
                gamma,
            ),
            BuiltinEnv::Uniform { nx, nu, nk } => EnvSpec::new(
                UniformEnv {
                    dims: Dims {
                        nx: *nx,
                        nu: *nu,
                        nk: *nk,
                    },
                },
                gamma,
            ),
            BuiltinEnv::Cycle { nx, nu, nk } => EnvSpec::new(
                CycleEnv {
                    dims: Dims {
                        nx: *nx,
                        nu: *nu,
                        nk: *nk,
                    },
                },
                gamma,
            ),
            BuiltinEnv::Bandit { nx, nk, arm_rewards } => {
                if arm_rewards.is_empty() {
                    return Err(MfcError::ConfigError("bandit needs at least one arm".into()));
                }
                EnvSpec::new(
                    BanditEnv {
                        nx: *nx,
                        nk: *nk,
                        arm_rewards: arm_rewards.clone(),
                    },
                    gamma,
                )
            }
            BuiltinEnv::Congestion(p) => EnvSpec::new(CongestionEnv::new(p)?, gamma),
            BuiltinEnv::MarginalCongestion(p) => EnvSpec::new(MarginalCongestionEnv::new(p)?, gamma),
            BuiltinEnv::SisEpidemic(p) => EnvSpec::new(SisEpidemicEnv::new(p.clone())?, gamma),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn congestion() -> EnvSpec {
        let p = CongestionParams {
            nx: 3,
            nu: 2,
            nk: 2,
            cost: vec![0.5, 1.0],
            mixing: 0.4,
            interaction: Some(vec![1.0, 0.5, 0.25, 1.0]),
            base_reward: None,
            base_kernel: None,
        };
        EnvSpec::new(CongestionEnv::new(&p).unwrap(), 0.5).unwrap()
    }

    #[test]
    fn gamma_outside_unit_interval_is_rejected() {
        let e = ConstantEnv {
            dims: Dims { nx: 1, nu: 1, nk: 1 },
            value: 1.0,
        };
        assert!(matches!(
            EnvSpec::new(e.clone(), 1.0),
            Err(MfcError::InvalidDiscount(_))
        ));
        assert!(matches!(EnvSpec::new(e, -0.1), Err(MfcError::InvalidDiscount(_))));
    }

    #[test]
    fn congestion_reward_matches_hand_computation() {
        let env = congestion();
        let w = ClassWeights::new(vec![1, 1]).unwrap();
        let mu = JointDist::uniform(3, &w);
        let nu = JointDist::new(2, 2, vec![0.3, 0.2, 0.2, 0.3]).unwrap();
        let r = env.reward(1, 2, 0, &RegimeArgs::Joint { mu: &mu, nu: &nu }).unwrap();
        let base = default_base_reward(2, 3, 2)[(3 + 2) * 2];
        assert!((r - (base - 1.0 * (0.25 * 0.3 + 1.0 * 0.2))).abs() < 1e-15);
    }

    #[test]
    fn wrong_regime_is_rejected() {
        let env = congestion();
        let mu = ClassDistCollection::uniform(3, 2);
        let nu = ClassDistCollection::uniform(2, 2);
        assert!(matches!(
            env.reward(0, 0, 0, &RegimeArgs::Class { mu: &mu, nu: &nu }),
            Err(MfcError::RegimeError { .. })
        ));
    }

    #[test]
    fn estimated_constants_stay_below_declared() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sis = EnvSpec::new(SisEpidemicEnv::new(SisParams::two_class()).unwrap(), 0.9).unwrap();
        for env in [congestion(), sis] {
            let c = env.constants();
            let lr = estimate_lipschitz(&env, LipschitzField::Reward, 4000, &mut rng);
            let lp = estimate_lipschitz(&env, LipschitzField::Transition, 4000, &mut rng);
            let mr = estimate_lipschitz(&env, LipschitzField::RewardBound, 4000, &mut rng);
            assert!(lr <= c.l_r + 1e-12, "{lr} > {}", c.l_r);
            assert!(lp <= c.l_p + 1e-12, "{lp} > {}", c.l_p);
            assert!(mr <= c.m_r + 1e-12);
            assert!(lp > 0.3 * c.l_p, "declared L_P far from estimate");
        }
    }

    #[test]
    fn builtin_configs_reject_unknown_keys() {
        let ok: BuiltinEnv = serde_json::from_str(r#"{"name":"uniform","nx":1,"nu":32,"nk":1}"#).unwrap();
        assert_eq!(ok, BuiltinEnv::Uniform { nx: 1, nu: 32, nk: 1 });
        assert!(serde_json::from_str::<BuiltinEnv>(r#"{"name":"uniform","nx":1,"nu":32,"nk":1,"x":0}"#).is_err());
        assert!(serde_json::from_str::<BuiltinEnv>(
            r#"{"name":"congestion","nx":3,"nu":2,"nk":1,"cost":[1.0],"mixing":0.1,"bogus":1}"#
        )
        .is_err());
    }
}
