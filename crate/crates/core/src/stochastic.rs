//! Seeded randomness, uniform time grids, Brownian paths and the exact
//! Brownian-bridge crossing probability.
//!
//! # Random streams
//!
//! Every random quantity in the crate is drawn from a [`SimRng`] built from a
//! [`SeedSpec`]. The generator is PCG-64 (MCG variant, 128-bit state) seeded
//! from a SplitMix64 mix of `(master_seed, stream_id)`. Gaussians use the
//! ziggurat sampler `rand_distr::StandardNormal`, exponentials use
//! `rand_distr::Exp1`. Both choices are fixed for a release; statistical tests
//! do not rely on bit patterns.
//!
//! Streams are counter based: a replicate, a particle or a spine sample each
//! derive their own stream from a label, so results never depend on the order
//! in which workers pick up tasks.

use rand::RngExt;
use rand_distr::StandardNormal;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SimRng = Pcg64Mcg;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn combine(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b).rotate_left(17))
}

/// FNV-1a over the bytes of a name; stable across platforms and releases.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Identifies one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        SeedSpec {
            master_seed,
            stream_id,
        }
    }

    /// Stream for replicate `replicate` of the experiment called `experiment`.
    pub fn for_replicate(master_seed: u64, experiment: &str, replicate: u64) -> Self {
        SeedSpec::new(master_seed, combine(name_hash(experiment), replicate))
    }

    /// A sub-stream keyed by `label`; distinct labels give unrelated streams.
    pub fn child(&self, label: u64) -> Self {
        SeedSpec::new(self.master_seed, combine(self.stream_id, label))
    }

    pub fn rng(&self) -> SimRng {
        let hi = combine(self.master_seed, self.stream_id);
        let lo = mix64(hi ^ 0x5851_F42D_4C95_7F2D);
        Pcg64Mcg::new((u128::from(hi) << 64) | u128::from(lo))
    }

    /// Generator for a particle with heap label `label` inside the tree
    /// seeded by `self`.
    pub(crate) fn particle_rng(&self, label: u128) -> SimRng {
        let base = combine(self.master_seed, self.stream_id);
        let hi = combine(base, label as u64);
        let lo = combine(hi, (label >> 64) as u64 ^ 0xA076_1D64_78BD_642F);
        Pcg64Mcg::new((u128::from(hi) << 64) | u128::from(lo))
    }

    /// Uniform in [0,1) attached to step `step` of particle `label`, drawn
    /// outside the particle's own generator so that barrier decisions never
    /// perturb the path.
    #[inline]
    pub(crate) fn step_uniform(&self, label: u128, step: u32) -> f64 {
        let base = combine(self.master_seed ^ 0xD6E8_FEB8_6659_FD93, self.stream_id);
        let h = combine(
            combine(base, label as u64),
            ((label >> 64) as u64).rotate_left(32) ^ u64::from(step),
        );
        (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[inline]
pub fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

#[inline]
pub fn exp1(rng: &mut SimRng) -> f64 {
    rng.sample(rand_distr::Exp1)
}

#[inline]
pub fn uniform(rng: &mut SimRng) -> f64 {
    rng.random::<f64>()
}

/// Uniform discretization of `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        if !t_start.is_finite() {
            return Err(Error::InvalidGrid("t_start must be finite".into()));
        }
        Ok(TimeGrid {
            t_start,
            t_end: t_start + n_steps as f64 * dt,
            dt,
            n_steps,
        })
    }

    /// Grid on `[0, t_end]` with the largest step not exceeding `max_dt`
    /// that divides `t_end` evenly.
    pub fn covering(t_end: f64, max_dt: f64) -> Result<Self> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(Error::InvalidGrid(format!("t_end must be positive, got {t_end}")));
        }
        if !(max_dt > 0.0) {
            return Err(Error::InvalidGrid(format!("dt must be positive, got {max_dt}")));
        }
        let n = ((t_end / max_dt) - 1e-9).ceil().max(1.0) as usize;
        let mut grid = TimeGrid::new(0.0, t_end / n as f64, n)?;
        grid.t_end = t_end;
        Ok(grid)
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.t_end
        } else {
            self.t_start + i as f64 * self.dt
        }
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    /// Index of the grid point equal to `t` (within a relative tolerance).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = (t - self.t_start) / self.dt;
        let i = x.round();
        if i < 0.0 || i > self.n_steps as f64 {
            return None;
        }
        if (x - i).abs() <= 1e-7 {
            Some(i as usize)
        } else {
            None
        }
    }

    /// Smallest grid index whose time is strictly greater than `t`.
    #[inline]
    pub fn first_index_after(&self, t: f64) -> usize {
        let x = (t - self.t_start) / self.dt;
        let mut i = (x.floor() + 1.0).max(0.0) as usize;
        while i > 0 && self.time(i - 1) > t {
            i -= 1;
        }
        while i <= self.n_steps && self.time(i) <= t {
            i += 1;
        }
        i
    }

    /// Smallest grid index whose time is at least `t`, if any.
    pub fn first_index_at_or_after(&self, t: f64) -> Option<usize> {
        if let Some(i) = self.index_of(t) {
            return Some(i);
        }
        let i = self.first_index_after(t);
        (i <= self.n_steps).then_some(i)
    }
}

/// A real-valued process sampled on every point of a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPath {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl GridPath {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::arg(
                "values",
                format!("expected {} values, got {}", grid.len(), values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("values", "all path values must be finite"));
        }
        Ok(GridPath { grid, values })
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn at(&self, t: f64) -> Option<f64> {
        self.grid.index_of(t).map(|i| self.values[i])
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.grid.len()).map(|i| self.grid.time(i))
    }
}

/// Standard Brownian motion started at `x0`, sampled on `grid`.
pub fn simulate_brownian(x0: f64, grid: &TimeGrid, seed: SeedSpec) -> Result<GridPath> {
    if !(grid.dt > 0.0) || grid.n_steps == 0 {
        return Err(Error::InvalidGrid("dt must be positive".into()));
    }
    let mut rng = seed.rng();
    let mut values = Vec::with_capacity(grid.len());
    let mut x = x0;
    values.push(x);
    for i in 0..grid.n_steps {
        let h = grid.time(i + 1) - grid.time(i);
        x += h.sqrt() * normal(&mut rng);
        values.push(x);
    }
    GridPath::new(*grid, values)
}

/// Probability that a Brownian bridge from `a` to `b` over a step of length
/// `h` reaches the level `c`.
pub fn bridge_exceeds_prob(a: f64, b: f64, h: f64, c: f64) -> Result<f64> {
    bridge_crossing_prob(a, b, h, c, c)
}

/// Crossing probability for a barrier moving linearly from `c0` to `c1`
/// over the step. Exact for linear barriers; a chord approximation otherwise.
pub fn bridge_crossing_prob(a: f64, b: f64, h: f64, c0: f64, c1: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::arg("h", format!("step duration must be positive, got {h}")));
    }
    Ok(crossing_prob_unchecked(a, b, h, c0, c1))
}

#[inline]
pub(crate) fn crossing_prob_unchecked(a: f64, b: f64, h: f64, c0: f64, c1: f64) -> f64 {
    if a >= c0 || b >= c1 {
        return 1.0;
    }
    (-2.0 * (c0 - a) * (c1 - b) / h).exp()
}

/// Log-probability below which a step is treated as not crossing without
/// consulting the step uniform. Shared by every engine so that decisions agree.
pub(crate) const NEGLIGIBLE_LOG_CROSSING: f64 = -40.0;

/// Stochastic crossing decision for one path step.
#[inline]
pub(crate) fn step_crosses(
    seed: &SeedSpec,
    label: u128,
    step: u32,
    a: f64,
    b: f64,
    h: f64,
    c0: f64,
    c1: f64,
) -> bool {
    if a >= c0 || b >= c1 {
        return true;
    }
    let log_p = -2.0 * (c0 - a) * (c1 - b) / h;
    if log_p < NEGLIGIBLE_LOG_CROSSING {
        return false;
    }
    seed.step_uniform(label, step) < log_p.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_step() {
        assert!(TimeGrid::new(0.0, 0.0, 10).is_err());
        assert!(TimeGrid::new(0.0, -0.1, 10).is_err());
        assert!(TimeGrid::new(0.0, 0.1, 0).is_err());
        let g = TimeGrid::new(1.0, 0.25, 8).unwrap();
        assert_eq!(g.t_end, 3.0);
    }

    #[test]
    fn covering_grid_hits_endpoint() {
        let g = TimeGrid::covering(8.0, 0.02).unwrap();
        assert_eq!(g.n_steps, 400);
        assert_eq!(g.time(400), 8.0);
        let g = TimeGrid::covering(1.0, 0.3).unwrap();
        assert_eq!(g.n_steps, 4);
        assert!((g.dt - 0.25).abs() < 1e-15);
    }

    #[test]
    fn grid_index_lookup() {
        let g = TimeGrid::covering(8.0, 0.02).unwrap();
        assert_eq!(g.index_of(6.0), Some(300));
        assert_eq!(g.index_of(6.01), None);
        assert_eq!(g.first_index_after(0.0), 1);
        assert_eq!(g.first_index_after(0.02), 2);
        assert_eq!(g.first_index_after(0.021), 2);
        assert_eq!(g.first_index_after(8.0), 401);
        assert_eq!(g.first_index_at_or_after(0.02), Some(1));
        assert_eq!(g.first_index_at_or_after(7.999), Some(400));
        assert_eq!(g.first_index_at_or_after(8.5), None);
    }

    #[test]
    fn brownian_starts_at_x0_and_is_deterministic() {
        let g = TimeGrid::covering(2.0, 0.01).unwrap();
        let s = SeedSpec::new(11, 3);
        let p = simulate_brownian(5.0, &g, s).unwrap();
        assert_eq!(p.first(), 5.0);
        assert_eq!(p.values.len(), 201);
        let q = simulate_brownian(5.0, &g, s).unwrap();
        assert_eq!(p, q);
        let r = simulate_brownian(5.0, &g, SeedSpec::new(11, 4)).unwrap();
        assert_ne!(p, r);
    }

    #[test]
    fn brownian_increment_variance() {
        // 10^6 increments at dt = 0.01: sample variance within 3 standard errors.
        let dt = 0.01;
        let g = TimeGrid::new(0.0, dt, 1_000_000).unwrap();
        let p = simulate_brownian(0.0, &g, SeedSpec::new(5, 0)).unwrap();
        let n = g.n_steps as f64;
        let incs: Vec<f64> = p.values.windows(2).map(|w| w[1] - w[0]).collect();
        let mean = incs.iter().sum::<f64>() / n;
        let var = incs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // Var of the sample variance of Gaussians is 2 sigma^4 / (n-1).
        let se = (2.0 * dt * dt / (n - 1.0)).sqrt();
        assert!((var - dt).abs() < 3.0 * se, "var {var} vs {dt}");
        assert!(mean.abs() < 3.0 * (dt / n).sqrt());
    }

    #[test]
    fn bridge_probability_examples() {
        let p = bridge_exceeds_prob(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!((p - 0.135_335_283_236_612_7).abs() < 1e-15);
        assert_eq!(bridge_exceeds_prob(1.0, 0.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(bridge_exceeds_prob(0.0, 2.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(bridge_exceeds_prob(0.0, 0.0, 1.0, 1e6).unwrap(), 0.0);
        assert!(bridge_exceeds_prob(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(bridge_exceeds_prob(0.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn step_uniforms_are_spread() {
        let s = SeedSpec::new(1, 2);
        let n = 100_000;
        let mean: f64 = (0..n).map(|k| s.step_uniform(7, k)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (1.0 / 12.0 / n as f64).sqrt() * 1.5);
        assert_ne!(s.step_uniform(7, 0), s.step_uniform(6, 0));
        assert_ne!(s.step_uniform(7, 0), s.step_uniform(1u128 << 70 | 7, 0));
    }

    #[test]
    fn replicate_streams_differ() {
        let a = SeedSpec::for_replicate(7, "median", 0);
        let b = SeedSpec::for_replicate(7, "median", 1);
        let c = SeedSpec::for_replicate(7, "tail", 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, SeedSpec::for_replicate(7, "median", 0));
    }
}
