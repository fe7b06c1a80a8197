//! Monte-Carlo summaries, seeded random streams and small regressions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

/// Random stream for `(seed, stream)`. Distinct streams of one seed are
/// independent ChaCha8 sequences, so per-replication results do not depend
/// on how replications are scheduled across threads.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for an independent sub-experiment tagged `tag`, taken from the
/// first word of stream `tag` of `seed` in the top half of the stream space.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, (1 << 63) | tag).next_u64()
}

/// Sample mean with its standard error and 95% normal interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl McEstimate {
    /// Summary of `samples`; summation runs in slice order so results are
    /// reproducible.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return McEstimate {
                mean: f64::NAN,
                stderr: f64::NAN,
                ci_low: f64::NAN,
                ci_high: f64::NAN,
                n,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        McEstimate {
            mean,
            stderr,
            ci_low: mean - Z95 * stderr,
            ci_high: mean + Z95 * stderr,
            n,
        }
    }

    /// `mean - 3 stderr`, the value compared against upper bounds.
    pub fn lower3(&self) -> f64 {
        self.mean - 3.0 * self.stderr
    }
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).0
}
