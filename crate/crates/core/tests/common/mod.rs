#![allow(dead_code)]

use mfc::distributions::JointDist;
use mfc::env_model::{Dims, EnvModel, LipschitzConstants, Regime, RegimeArgs};

/// Two states, two actions, joint regime:
/// `r = 0.3 x + 0.5 u - 0.4 ν_tot(u)` and
/// `P(1 | x, u) = 0.1 + 0.1 x + 0.4 u + 0.3 μ_tot(1)`, where `_tot` sums
/// over classes.
#[derive(Clone, Debug)]
pub struct TinyEnv {
    pub nk: usize,
}

fn totals(d: &JointDist) -> Vec<f64> {
    (0..d.n()).map(|i| (0..d.nk()).map(|k| d.get(i, k)).sum()).collect()
}

impl EnvModel for TinyEnv {
    fn name(&self) -> String {
        "tiny".into()
    }
    fn dims(&self) -> Dims {
        Dims {
            nx: 2,
            nu: 2,
            nk: self.nk,
        }
    }
    fn regime(&self) -> Regime {
        Regime::Joint
    }
    fn constants(&self) -> LipschitzConstants {
        LipschitzConstants {
            m_r: 0.8,
            l_r: 0.4,
            l_p: 0.6,
        }
    }
    fn reward(&self, _: usize, x: usize, u: usize, args: &RegimeArgs<'_>) -> f64 {
        let RegimeArgs::Joint { nu, .. } = args else { panic!() };
        0.3 * x as f64 + 0.5 * u as f64 - 0.4 * totals(nu)[u]
    }
    fn transition_into(&self, _: usize, x: usize, u: usize, args: &RegimeArgs<'_>, out: &mut [f64]) {
        let RegimeArgs::Joint { mu, .. } = args else { panic!() };
        let p1 = 0.1 + 0.1 * x as f64 + 0.4 * u as f64 + 0.3 * totals(mu)[1];
        out[0] = 1.0 - p1;
        out[1] = p1;
    }
}
