//! Monte Carlo summaries, shard merging, log-space accumulation and the
//! small amount of regression used by the experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stochastic::{SeedSpec, SimRng};

/// Sample mean with its standard error, sample count and the seed that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: u64,
    pub seed: SeedSpec,
}

impl MonteCarloEstimate {
    /// Two-sided z-score of the difference with `other`, using combined
    /// standard errors.
    pub fn z_distance(&self, other: &MonteCarloEstimate) -> f64 {
        let se = (self.stderr.powi(2) + other.stderr.powi(2)).sqrt();
        if se == 0.0 {
            if self.mean == other.mean {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - other.mean).abs() / se
        }
    }

    /// Distance in standard errors to a deterministic value.
    pub fn z_to(&self, value: f64) -> f64 {
        if self.stderr == 0.0 {
            if self.mean == value {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - value).abs() / self.stderr
        }
    }

    /// Normal-approximation confidence interval at `z` standard errors.
    pub fn ci(&self, z: f64) -> (f64, f64) {
        (self.mean - z * self.stderr, self.mean + z * self.stderr)
    }
}

/// Streaming mean/variance (Welford), mergeable across shards.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &MeanAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let mean = self.mean + d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64) * (other.n as f64) / n as f64;
        self.mean = mean;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self, seed: SeedSpec) -> MonteCarloEstimate {
        MonteCarloEstimate {
            mean: self.mean,
            stderr: if self.n == 0 {
                f64::NAN
            } else {
                (self.variance() / self.n as f64).sqrt()
            },
            n: self.n,
            seed,
        }
    }
}

impl FromIterator<f64> for MeanAccumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = MeanAccumulator::new();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

/// Mean of nonnegative weights supplied as natural logarithms
/// (`f64::NEG_INFINITY` for a zero weight). Accumulates relative to the
/// running maximum so that weights like `e^{40}` never overflow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMeanAccumulator {
    n: u64,
    shift: f64,
    s1: f64,
    s2: f64,
}

impl Default for LogMeanAccumulator {
    fn default() -> Self {
        LogMeanAccumulator {
            n: 0,
            shift: f64::NEG_INFINITY,
            s1: 0.0,
            s2: 0.0,
        }
    }
}

impl LogMeanAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn push_log(&mut self, log_w: f64) {
        self.n += 1;
        if log_w == f64::NEG_INFINITY {
            return;
        }
        debug_assert!(!log_w.is_nan());
        if log_w > self.shift {
            let r = (self.shift - log_w).exp();
            self.s1 *= r;
            self.s2 *= r * r;
            self.shift = log_w;
        }
        let w = (log_w - self.shift).exp();
        self.s1 += w;
        self.s2 += w * w;
    }

    pub fn merge(&mut self, other: &LogMeanAccumulator) {
        if other.s1 == 0.0 {
            self.n += other.n;
            return;
        }
        if self.s1 == 0.0 {
            let n = self.n;
            *self = *other;
            self.n += n;
            return;
        }
        let shift = self.shift.max(other.shift);
        let ra = (self.shift - shift).exp();
        let rb = (other.shift - shift).exp();
        self.s1 = self.s1 * ra + other.s1 * rb;
        self.s2 = self.s2 * ra * ra + other.s2 * rb * rb;
        self.shift = shift;
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn estimate(&self, seed: SeedSpec) -> MonteCarloEstimate {
        if self.n == 0 {
            return MonteCarloEstimate {
                mean: f64::NAN,
                stderr: f64::NAN,
                n: 0,
                seed,
            };
        }
        if self.s1 == 0.0 {
            return MonteCarloEstimate {
                mean: 0.0,
                stderr: 0.0,
                n: self.n,
                seed,
            };
        }
        let n = self.n as f64;
        let m1 = self.s1 / n;
        let m2 = self.s2 / n;
        let var_scaled = if self.n > 1 {
            ((m2 - m1 * m1) * n / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        let scale = self.shift.exp();
        MonteCarloEstimate {
            mean: scale * m1,
            stderr: scale * (var_scaled / n).sqrt(),
            n: self.n,
            seed,
        }
    }
}

/// Samples per work item in the parallel estimators. Fixed so that the
/// merge order, and therefore every bit of the result, is independent of
/// the thread count.
pub const CHUNK: u64 = 1 << 14;

/// Mean of `sample(i, rng)` over `i in 0..n`, where sample `i` draws from
/// the stream `seed.child(i)`.
pub fn parallel_mean<F>(n: u64, seed: SeedSpec, sample: F) -> MonteCarloEstimate
where
    F: Fn(u64, &mut SimRng) -> f64 + Sync,
{
    let chunks: Vec<MeanAccumulator> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = MeanAccumulator::new();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let mut rng = seed.child(i).rng();
                acc.push(sample(i, &mut rng));
            }
            acc
        })
        .collect();
    let mut total = MeanAccumulator::new();
    for c in &chunks {
        total.merge(c);
    }
    total.estimate(seed)
}

/// Like [`parallel_mean`] for samples given as log-weights.
pub fn parallel_log_mean<F>(n: u64, seed: SeedSpec, sample: F) -> MonteCarloEstimate
where
    F: Fn(u64, &mut SimRng) -> f64 + Sync,
{
    let chunks: Vec<LogMeanAccumulator> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = LogMeanAccumulator::new();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let mut rng = seed.child(i).rng();
                acc.push_log(sample(i, &mut rng));
            }
            acc
        })
        .collect();
    let mut total = LogMeanAccumulator::new();
    for c in &chunks {
        total.merge(c);
    }
    total.estimate(seed)
}

/// Binomial proportion with its standard error.
pub fn proportion(successes: u64, n: u64, seed: SeedSpec) -> MonteCarloEstimate {
    let p = if n == 0 { f64::NAN } else { successes as f64 / n as f64 };
    MonteCarloEstimate {
        mean: p,
        stderr: if n == 0 { f64::NAN } else { (p * (1.0 - p) / n as f64).sqrt() },
        n,
        seed,
    }
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// `sup{x : F_n(x) <= 1/2}` for the empirical distribution of `values`:
/// the order statistic of (0-based) rank `floor(n/2)`.
pub fn upper_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let k = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Some(*m)
}

/// Empirical quantile by the nearest-rank rule.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub estimate: f64,
    pub stderr: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub resamples: usize,
}

/// Percentile bootstrap for the upper median.
pub fn bootstrap_median(values: &[f64], resamples: usize, rng: &mut SimRng) -> Option<BootstrapSummary> {
    use rand::RngExt;
    let estimate = upper_median(values)?;
    let n = values.len();
    let mut buf = vec![0.0; n];
    let mut meds = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for slot in buf.iter_mut() {
            *slot = values[rng.random_range(0..n)];
        }
        let k = n / 2;
        let (_, m, _) = buf.select_nth_unstable_by(k, f64::total_cmp);
        meds.push(*m);
    }
    let acc: MeanAccumulator = meds.iter().copied().collect();
    meds.sort_by(f64::total_cmp);
    Some(BootstrapSummary {
        estimate,
        stderr: acc.variance().sqrt(),
        ci_lo: quantile(&meds, 0.025),
        ci_hi: quantile(&meds, 0.975),
        resamples,
    })
}

/// Ordinary least squares fit `y = intercept + slope * x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_se: f64,
    pub slope_se: f64,
    pub residuals: Vec<f64>,
}

pub fn ols_fit(x: &[f64], y: &[f64]) -> Result<FitResult> {
    if x.len() != y.len() {
        return Err(Error::arg("y", "x and y must have equal length"));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::arg("x", format!("need at least 3 points for a fit, got {n}")));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|xi| (xi - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::arg("x", "design has no spread in x"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(xi, yi)| yi - intercept - slope * xi).collect();
    let s2 = residuals.iter().map(|r| r * r).sum::<f64>() / (nf - 2.0);
    Ok(FitResult {
        intercept,
        slope,
        intercept_se: (s2 * (1.0 / nf + mx * mx / sxx)).sqrt(),
        slope_se: (s2 / sxx).sqrt(),
        residuals,
    })
}
