//! Probability distributions over states (or actions) and classes.
//!
//! Three shapes are used throughout the crate:
//! [`JointDist`] is a distribution over `(atom, class)` pairs whose class
//! marginal equals the class weights, [`ClassDistCollection`] holds one
//! normalised row per class, and [`MarginalDist`] is a plain distribution
//! over atoms. The same types serve for states (atoms are states) and for
//! actions (atoms are actions).

use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{MfcError, Result};

/// Entries and sums within this distance of their target are accepted as is.
pub const NORM_TOL: f64 = 1e-12;
/// Sums within this distance of one are renormalised instead of rejected.
pub const RENORM_TOL: f64 = 1e-9;
/// Allowed discrepancy between a class mass and its class weight.
pub const THETA_TOL: f64 = 1e-9;

/// Validates a probability vector in place: tiny negative entries are
/// clipped, a sum drift below [`RENORM_TOL`] is renormalised.
fn normalize(values: &mut [f64]) -> Result<()> {
    for (index, v) in values.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(MfcError::NotNormalized { sum: *v });
        }
        if *v < -NORM_TOL {
            return Err(MfcError::NegativeEntry { index, value: *v });
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let sum: f64 = values.iter().sum();
    let drift = (sum - 1.0).abs();
    if drift <= NORM_TOL {
        Ok(())
    } else if drift < RENORM_TOL {
        values.iter_mut().for_each(|v| *v /= sum);
        Ok(())
    } else {
        Err(MfcError::NotNormalized { sum })
    }
}

/// Read access to the dense storage of a distribution type.
pub trait ProbVector {
    fn as_slice(&self) -> &[f64];
    /// `(atoms, classes)`; marginals report one class.
    fn shape(&self) -> (usize, usize);
}

/// L1 distance between two slices of equal length.
pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// L1 distance between two distributions of the same shape.
pub fn l1_distance<D: ProbVector>(a: &D, b: &D) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MfcError::ShapeError(format!(
            "cannot compare shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(l1(a.as_slice(), b.as_slice()))
}

/// Population sizes per class and the derived class weights `N_k / N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightsRepr", into = "WeightsRepr")]
pub struct ClassWeights {
    pops: Vec<usize>,
    theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsRepr {
    populations: Vec<usize>,
}

impl TryFrom<WeightsRepr> for ClassWeights {
    type Error = MfcError;
    fn try_from(r: WeightsRepr) -> Result<Self> {
        ClassWeights::new(r.populations)
    }
}

impl From<ClassWeights> for WeightsRepr {
    fn from(w: ClassWeights) -> Self {
        WeightsRepr { populations: w.pops }
    }
}

impl ClassWeights {
    pub fn new(pops: Vec<usize>) -> Result<Self> {
        if pops.is_empty() {
            return Err(MfcError::InvalidWeights("no classes".into()));
        }
        if let Some(k) = pops.iter().position(|&n| n == 0) {
            return Err(MfcError::InvalidWeights(format!("class {k} is empty")));
        }
        let total: usize = pops.iter().sum();
        let theta = pops.iter().map(|&n| n as f64 / total as f64).collect();
        Ok(ClassWeights { pops, theta })
    }

    /// `k` classes of `n` agents each.
    pub fn equal(k: usize, n: usize) -> Result<Self> {
        Self::new(vec![n; k])
    }

    pub fn nk(&self) -> usize {
        self.pops.len()
    }

    pub fn pops(&self) -> &[usize] {
        &self.pops
    }

    pub fn n_pop(&self) -> usize {
        self.pops.iter().sum()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// `max_k 1 / θ_k`.
    pub fn theta_max_inv(&self) -> f64 {
        self.theta.iter().map(|t| 1.0 / t).fold(0.0, f64::max)
    }

    /// `Σ_k √N_k`.
    pub fn sum_sqrt(&self) -> f64 {
        self.pops.iter().map(|&n| (n as f64).sqrt()).sum()
    }

    /// `Σ_k 1/√N_k`.
    pub fn sum_inv_sqrt(&self) -> f64 {
        self.pops.iter().map(|&n| 1.0 / (n as f64).sqrt()).sum()
    }
}

/// Distribution over `(atom, class)` pairs, stored row-major with the atom
/// as row index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JointRepr", into = "JointRepr")]
pub struct JointDist {
    n: usize,
    nk: usize,
    values: Vec<f64>,
}

/// Joint distribution over `(action, class)` pairs.
pub type ActionJointDist = JointDist;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointRepr {
    n_atoms: usize,
    n_classes: usize,
    values: Vec<f64>,
}

impl TryFrom<JointRepr> for JointDist {
    type Error = MfcError;
    fn try_from(r: JointRepr) -> Result<Self> {
        JointDist::new(r.n_atoms, r.n_classes, r.values)
    }
}

impl From<JointDist> for JointRepr {
    fn from(d: JointDist) -> Self {
        JointRepr {
            n_atoms: d.n,
            n_classes: d.nk,
            values: d.values,
        }
    }
}

impl ProbVector for JointDist {
    fn as_slice(&self) -> &[f64] {
        &self.values
    }
    fn shape(&self) -> (usize, usize) {
        (self.n, self.nk)
    }
}

impl JointDist {
    pub fn new(n: usize, nk: usize, mut values: Vec<f64>) -> Result<Self> {
        if n == 0 || nk == 0 || values.len() != n * nk {
            return Err(MfcError::ShapeError(format!(
                "joint distribution {n}x{nk} given {} values",
                values.len()
            )));
        }
        normalize(&mut values)?;
        Ok(JointDist { n, nk, values })
    }

    /// Uniform over atoms within each class, with class masses `θ`.
    pub fn uniform(n: usize, weights: &ClassWeights) -> Self {
        let nk = weights.nk();
        let mut values = vec![0.0; n * nk];
        for x in 0..n {
            for (k, t) in weights.theta().iter().enumerate() {
                values[x * nk + k] = t / n as f64;
            }
        }
        JointDist { n, nk, values }
    }

    /// Empirical distribution from per-class atom counts laid out as
    /// `counts[k * n + x]`.
    pub fn from_counts(n: usize, weights: &ClassWeights, counts: &[u64]) -> Result<Self> {
        let nk = weights.nk();
        if counts.len() != n * nk {
            return Err(MfcError::ShapeError(format!(
                "expected {} counts, found {}",
                n * nk,
                counts.len()
            )));
        }
        let total = weights.n_pop() as f64;
        let mut values = vec![0.0; n * nk];
        for k in 0..nk {
            let found: u64 = counts[k * n..(k + 1) * n].iter().sum();
            if found as usize != weights.pops()[k] {
                return Err(MfcError::PopulationMismatch {
                    class: k,
                    expected: weights.pops()[k],
                    found: found as usize,
                });
            }
            for x in 0..n {
                values[x * nk + k] = counts[k * n + x] as f64 / total;
            }
        }
        JointDist::new(n, nk, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nk(&self) -> usize {
        self.nk
    }

    pub fn get(&self, x: usize, k: usize) -> f64 {
        self.values[x * self.nk + k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn class_mass(&self, k: usize) -> f64 {
        (0..self.n).map(|x| self.get(x, k)).sum()
    }

    pub fn class_masses(&self) -> Vec<f64> {
        (0..self.nk).map(|k| self.class_mass(k)).collect()
    }

    /// Marginal over atoms, `μ[X]`.
    pub fn marginal(&self) -> MarginalDist {
        let values = (0..self.n)
            .map(|x| self.values[x * self.nk..(x + 1) * self.nk].iter().sum())
            .collect();
        MarginalDist { values }
    }

    /// Checks that every class mass matches its weight within [`THETA_TOL`].
    pub fn check_weights(&self, weights: &ClassWeights) -> Result<()> {
        if weights.nk() != self.nk {
            return Err(MfcError::ShapeError(format!(
                "{} class weights for a distribution with {} classes",
                weights.nk(),
                self.nk
            )));
        }
        for (k, &t) in weights.theta().iter().enumerate() {
            let m = self.class_mass(k);
            if (m - t).abs() > THETA_TOL {
                return Err(MfcError::ThetaIncompatible {
                    class: k,
                    expected: t,
                    found: m,
                });
            }
        }
        Ok(())
    }
}

/// One normalised distribution per class, stored class by class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CollectionRepr", into = "CollectionRepr")]
pub struct ClassDistCollection {
    n: usize,
    nk: usize,
    rows: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CollectionRepr {
    n_atoms: usize,
    n_classes: usize,
    rows: Vec<f64>,
}

impl TryFrom<CollectionRepr> for ClassDistCollection {
    type Error = MfcError;
    fn try_from(r: CollectionRepr) -> Result<Self> {
        ClassDistCollection::new(r.n_atoms, r.n_classes, r.rows)
    }
}

impl From<ClassDistCollection> for CollectionRepr {
    fn from(d: ClassDistCollection) -> Self {
        CollectionRepr {
            n_atoms: d.n,
            n_classes: d.nk,
            rows: d.rows,
        }
    }
}

impl ProbVector for ClassDistCollection {
    fn as_slice(&self) -> &[f64] {
        &self.rows
    }
    fn shape(&self) -> (usize, usize) {
        (self.n, self.nk)
    }
}

impl ClassDistCollection {
    /// `rows[k * n + x]` is the probability of atom `x` within class `k`.
    pub fn new(n: usize, nk: usize, mut rows: Vec<f64>) -> Result<Self> {
        if n == 0 || nk == 0 || rows.len() != n * nk {
            return Err(MfcError::ShapeError(format!(
                "class collection {n}x{nk} given {} values",
                rows.len()
            )));
        }
        for row in rows.chunks_mut(n) {
            normalize(row)?;
        }
        Ok(ClassDistCollection { n, nk, rows })
    }

    pub fn uniform(n: usize, nk: usize) -> Self {
        ClassDistCollection {
            n,
            nk,
            rows: vec![1.0 / n as f64; n * nk],
        }
    }

    /// Per-class empirical distributions from counts laid out as
    /// `counts[k * n + x]`.
    pub fn from_counts(n: usize, weights: &ClassWeights, counts: &[u64]) -> Result<Self> {
        let nk = weights.nk();
        if counts.len() != n * nk {
            return Err(MfcError::ShapeError(format!(
                "expected {} counts, found {}",
                n * nk,
                counts.len()
            )));
        }
        let mut rows = vec![0.0; n * nk];
        for k in 0..nk {
            let nk_pop = weights.pops()[k];
            let found: u64 = counts[k * n..(k + 1) * n].iter().sum();
            if found as usize != nk_pop {
                return Err(MfcError::PopulationMismatch {
                    class: k,
                    expected: nk_pop,
                    found: found as usize,
                });
            }
            for x in 0..n {
                rows[k * n + x] = counts[k * n + x] as f64 / nk_pop as f64;
            }
        }
        ClassDistCollection::new(n, nk, rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nk(&self) -> usize {
        self.nk
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.n..(k + 1) * self.n]
    }

    pub fn get(&self, x: usize, k: usize) -> f64 {
        self.rows[k * self.n + x]
    }
}

/// Distribution over atoms only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarginalRepr", into = "MarginalRepr")]
pub struct MarginalDist {
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarginalRepr {
    n_atoms: usize,
    values: Vec<f64>,
}

impl TryFrom<MarginalRepr> for MarginalDist {
    type Error = MfcError;
    fn try_from(r: MarginalRepr) -> Result<Self> {
        if r.values.len() != r.n_atoms {
            return Err(MfcError::ShapeError(format!(
                "marginal with {} atoms given {} values",
                r.n_atoms,
                r.values.len()
            )));
        }
        MarginalDist::new(r.values)
    }
}

impl From<MarginalDist> for MarginalRepr {
    fn from(d: MarginalDist) -> Self {
        MarginalRepr {
            n_atoms: d.values.len(),
            values: d.values,
        }
    }
}

impl ProbVector for MarginalDist {
    fn as_slice(&self) -> &[f64] {
        &self.values
    }
    fn shape(&self) -> (usize, usize) {
        (self.values.len(), 1)
    }
}

impl MarginalDist {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(MfcError::ShapeError("empty marginal".into()));
        }
        normalize(&mut values)?;
        Ok(MarginalDist { values })
    }

    pub fn uniform(n: usize) -> Self {
        MarginalDist {
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn dirac(n: usize, i: usize) -> Result<Self> {
        if i >= n {
            return Err(MfcError::InvalidState { index: i, bound: n });
        }
        let mut values = vec![0.0; n];
        values[i] = 1.0;
        Ok(MarginalDist { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.values, rng)
    }
}

/// `μ̄(·,k) = μ(·,k) / θ_k`; fails when the class masses of `mu` disagree
/// with `weights`.
pub fn joint_to_class(mu: &JointDist, weights: &ClassWeights) -> Result<ClassDistCollection> {
    mu.check_weights(weights)?;
    let (n, nk) = (mu.n, mu.nk);
    let mut rows = vec![0.0; n * nk];
    for k in 0..nk {
        let t = weights.theta()[k];
        for x in 0..n {
            rows[k * n + x] = mu.get(x, k) / t;
        }
    }
    ClassDistCollection::new(n, nk, rows)
}

/// `μ(x,k) = θ_k μ̄(x,k)`.
pub fn class_to_joint(bar: &ClassDistCollection, weights: &ClassWeights) -> Result<JointDist> {
    if weights.nk() != bar.nk {
        return Err(MfcError::ShapeError(format!(
            "{} class weights for a collection with {} classes",
            weights.nk(),
            bar.nk
        )));
    }
    let (n, nk) = (bar.n, bar.nk);
    let mut values = vec![0.0; n * nk];
    for k in 0..nk {
        let t = weights.theta()[k];
        for x in 0..n {
            values[x * nk + k] = t * bar.get(x, k);
        }
    }
    JointDist::new(n, nk, values)
}

/// Per-class atom counts `counts[k * n + x]` from per-class agent lists.
pub fn count_atoms(agents: &[Vec<usize>], n: usize, weights: &ClassWeights) -> Result<Vec<u64>> {
    if agents.len() != weights.nk() {
        return Err(MfcError::ShapeError(format!(
            "{} agent lists for {} classes",
            agents.len(),
            weights.nk()
        )));
    }
    let mut counts = vec![0u64; n * weights.nk()];
    for (k, list) in agents.iter().enumerate() {
        if list.len() != weights.pops()[k] {
            return Err(MfcError::PopulationMismatch {
                class: k,
                expected: weights.pops()[k],
                found: list.len(),
            });
        }
        for &x in list {
            if x >= n {
                return Err(MfcError::InvalidState { index: x, bound: n });
            }
            counts[k * n + x] += 1;
        }
    }
    Ok(counts)
}

/// Empirical joint distribution `μ^N(x,k) = #{agents of class k at x} / N`.
pub fn empirical_joint(agents: &[Vec<usize>], n: usize, weights: &ClassWeights) -> Result<JointDist> {
    let counts = count_atoms(agents, n, weights)?;
    JointDist::from_counts(n, weights, &counts)
}

/// Per-class empirical distributions `μ̄^N(x,k) = #{agents of class k at x} / N_k`.
pub fn empirical_class(agents: &[Vec<usize>], n: usize, weights: &ClassWeights) -> Result<ClassDistCollection> {
    let counts = count_atoms(agents, n, weights)?;
    ClassDistCollection::from_counts(n, weights, &counts)
}

/// Inverse-CDF draw from a probability vector. Falls back to the last atom
/// with positive mass when rounding leaves the uniform draw uncovered.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Multinomial draw of `n` trials over `probs`, written into `out`, using
/// sequential conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(n: u64, probs: &[f64], rng: &mut R, out: &mut [u64]) {
    debug_assert_eq!(probs.len(), out.len());
    out.iter_mut().for_each(|c| *c = 0);
    let mut remaining = n;
    let mut mass = 1.0;
    let last = probs.len() - 1;
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i == last || mass <= 0.0 {
            out[i] = remaining;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let draw = if q >= 1.0 {
            remaining
        } else if q <= 0.0 {
            0
        } else {
            Binomial::new(remaining, q)
                .expect("binomial parameters validated")
                .sample(rng)
        };
        out[i] = draw;
        remaining -= draw;
        mass -= p;
    }
}

/// Uniform draw from the probability simplex with `n` atoms (Dirichlet(1)).
pub fn sample_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter_mut().for_each(|x| *x /= s);
            return v;
        }
    }
}

/// Joint distribution drawn uniformly from the full simplex over `(atom, class)`.
pub fn random_joint<R: Rng + ?Sized>(n: usize, nk: usize, rng: &mut R) -> JointDist {
    JointDist::new(n, nk, sample_simplex(n * nk, rng)).expect("simplex draw is normalised")
}

/// Joint distribution whose class masses equal `weights`.
pub fn random_joint_with_weights<R: Rng + ?Sized>(n: usize, weights: &ClassWeights, rng: &mut R) -> JointDist {
    let bar = random_class_collection(n, weights.nk(), rng);
    class_to_joint(&bar, weights).expect("shapes agree")
}

pub fn random_class_collection<R: Rng + ?Sized>(n: usize, nk: usize, rng: &mut R) -> ClassDistCollection {
    let rows = (0..nk).flat_map(|_| sample_simplex(n, rng)).collect();
    ClassDistCollection::new(n, nk, rows).expect("simplex draws are normalised")
}

pub fn random_marginal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> MarginalDist {
    MarginalDist::new(sample_simplex(n, rng)).expect("simplex draw is normalised")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_drift_is_renormalised() {
        let d = MarginalDist::new(vec![0.5, 0.5 + 1e-10]).unwrap();
        let s: f64 = d.values().iter().sum();
        assert!((s - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn large_drift_is_rejected() {
        assert!(matches!(
            MarginalDist::new(vec![0.5, 0.6]),
            Err(MfcError::NotNormalized { .. })
        ));
        assert!(matches!(
            MarginalDist::new(vec![1.5, -0.5]),
            Err(MfcError::NegativeEntry { index: 1, .. })
        ));
    }

    #[test]
    fn empirical_joint_counts_agents() {
        let w = ClassWeights::new(vec![2, 3]).unwrap();
        let agents = vec![vec![0, 1], vec![1, 1, 2]];
        let mu = empirical_joint(&agents, 3, &w).unwrap();
        assert_eq!(mu.get(0, 0), 0.2);
        assert_eq!(mu.get(1, 1), 0.4);
        let masses = mu.class_masses();
        assert!((masses[0] - 0.4).abs() < 1e-15 && (masses[1] - 0.6).abs() < 1e-15);
        let bar = empirical_class(&agents, 3, &w).unwrap();
        assert_eq!(bar.row(1), &[0.0, 2.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn population_mismatch_is_reported() {
        let w = ClassWeights::new(vec![2, 3]).unwrap();
        let err = empirical_joint(&[vec![0, 1], vec![1]], 3, &w).unwrap_err();
        assert!(matches!(
            err,
            MfcError::PopulationMismatch {
                class: 1,
                expected: 3,
                found: 1
            }
        ));
        let err = empirical_joint(&[vec![0, 5], vec![1, 1, 1]], 3, &w).unwrap_err();
        assert!(matches!(err, MfcError::InvalidState { index: 5, bound: 3 }));
    }

    #[test]
    fn theta_mismatch_is_reported() {
        let w = ClassWeights::new(vec![1, 1]).unwrap();
        let mu = JointDist::new(2, 2, vec![0.4, 0.1, 0.4, 0.1]).unwrap();
        assert!(matches!(
            joint_to_class(&mu, &w),
            Err(MfcError::ThetaIncompatible { class: 0, .. })
        ));
    }

    #[test]
    fn multinomial_preserves_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = [0.2, 0.0, 0.5, 0.3];
        let mut out = [0u64; 4];
        for n in [0u64, 1, 7, 1000] {
            sample_multinomial(n, &probs, &mut rng, &mut out);
            assert_eq!(out.iter().sum::<u64>(), n);
            assert_eq!(out[1], 0);
        }
    }
}
