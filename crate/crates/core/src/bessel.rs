//! Bessel-3 processes: transition density and its sandwich bounds, exact
//! samplers, the coupled pair with an exponential split time, and Monte Carlo
//! estimators for the two-process functionals behind the second-moment
//! bounds.

use std::f64::consts::{E, FRAC_1_SQRT_2, PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;
use crate::stats::{parallel_mean, MonteCarloEstimate};
use crate::stochastic::{exp1, normal, uniform, GridPath, SeedSpec, SimRng, TimeGrid};

/// `√2 / √π`.
pub const GAMMA: f64 = 0.797_884_560_802_865_4;

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Domain {
            what: "t",
            value: t,
            domain: "(0, inf)".into(),
        });
    }
    Ok(())
}

fn check_nonneg(what: &'static str, v: f64) -> Result<()> {
    if !(v >= 0.0) {
        return Err(Error::Domain {
            what,
            value: v,
            domain: "[0, inf)".into(),
        });
    }
    Ok(())
}

/// Transition density `p_t(x, z)` of the Bessel-3 process.
pub fn bessel_density(t: f64, x: f64, z: f64) -> Result<f64> {
    check_time(t)?;
    check_nonneg("x", x)?;
    check_nonneg("z", z)?;
    Ok(density_unchecked(t, x, z))
}

#[inline]
pub(crate) fn density_unchecked(t: f64, x: f64, z: f64) -> f64 {
    if x == 0.0 {
        return GAMMA * z * z * t.powf(-1.5) * (-z * z / (2.0 * t)).exp();
    }
    // z/(x√(2πt)) · e^{-(z-x)²/2t} · (1 - e^{-2xz/t}), stable for small xz/t
    let d = z - x;
    z / (x * (2.0 * PI * t).sqrt()) * (-d * d / (2.0 * t)).exp() * -(-2.0 * x * z / t).exp_m1()
}

/// Lower and upper sandwich bounds `γz²t^{-3/2}e^{-(z²+x²)/2t}` and `γz²t^{-3/2}`.
pub fn bessel_density_bounds(t: f64, x: f64, z: f64) -> Result<(f64, f64)> {
    check_time(t)?;
    check_nonneg("x", x)?;
    check_nonneg("z", z)?;
    let upper = GAMMA * z * z * t.powf(-1.5);
    Ok((upper * (-(z * z + x * x) / (2.0 * t)).exp(), upper))
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `Φ(b) − Φ(a)` without cancellation in either tail.
#[inline]
pub(crate) fn normal_mass(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        0.5 * (libm::erfc(a * FRAC_1_SQRT_2) - libm::erfc(b * FRAC_1_SQRT_2))
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

#[inline]
fn gauss_density(w: f64, var: f64) -> f64 {
    (-w * w / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

/// Below this start position the closed forms lose digits to cancellation
/// and quadrature is used instead.
const SMALL_START: f64 = 1e-3;

/// `P_x(Y_u ∈ [a, b])` for a Bessel-3 process `Y`.
pub fn window_probability(x: f64, u: f64, a: f64, b: f64) -> f64 {
    let (a, b) = (a.max(0.0), b.max(0.0));
    if b <= a {
        return 0.0;
    }
    if x < SMALL_START {
        return quadrature::integrate(|z| density_unchecked(u, x, z), a, b, 1e-14, 1e-10)
            .unwrap_or(f64::NAN);
    }
    let s = u.sqrt();
    let minus = normal_mass((a - x) / s, (b - x) / s);
    let plus = normal_mass((a + x) / s, (b + x) / s);
    let edge = gauss_density(a - x, u) - gauss_density(b - x, u) - gauss_density(a + x, u)
        + gauss_density(b + x, u);
    (minus + plus + u / x * edge).clamp(0.0, 1.0)
}

/// `E_x[Y_u^{-1} e^{βY_u} 1{Y_u ∈ [a, b]}]`, returned as a natural log
/// (`-inf` when the mass underflows).
pub fn log_tilted_window_mean(x: f64, u: f64, beta: f64, a: f64, b: f64) -> f64 {
    let (a, b) = (a.max(0.0), b.max(0.0));
    if b <= a {
        return f64::NEG_INFINITY;
    }
    if x < SMALL_START {
        let v = quadrature::integrate(
            |z| if z > 0.0 { (beta * z).exp() / z * density_unchecked(u, x, z) } else { 0.0 },
            a,
            b,
            1e-300,
            1e-10,
        )
        .unwrap_or(f64::NAN);
        return v.ln();
    }
    // (1/x) e^{β²u/2} [e^{βx} ΔΦ(· − x − βu) − e^{−βx} ΔΦ(· + x − βu)]
    let s = u.sqrt();
    let shift = beta * u;
    let minus = normal_mass((a - x - shift) / s, (b - x - shift) / s);
    let plus = normal_mass((a + x - shift) / s, (b + x - shift) / s);
    let bracket = minus - (-2.0 * beta * x).exp() * plus;
    if !(bracket > 0.0) {
        return f64::NEG_INFINITY;
    }
    beta * beta * u / 2.0 + beta * x - x.ln() + bracket.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BesselParams {
    pub x0: f64,
}

impl BesselParams {
    pub fn new(x0: f64) -> Result<Self> {
        check_nonneg("x0", x0)?;
        Ok(BesselParams { x0 })
    }
}

/// Position at time `u` of a Bessel-3 process started at `x`, sampled exactly.
#[inline]
pub fn bessel_step(x: f64, u: f64, rng: &mut SimRng) -> f64 {
    let s = u.sqrt();
    let a = x + s * normal(rng);
    let b = s * normal(rng);
    let c = s * normal(rng);
    (a * a + b * b + c * c).sqrt()
}

/// Three-dimensional Brownian motion started at `(x0, 0, 0)`, reported as its
/// Euclidean norm on every grid point.
pub fn sample_bessel(params: BesselParams, grid: &TimeGrid, seed: SeedSpec) -> Result<GridPath> {
    check_nonneg("x0", params.x0)?;
    GridPath::new(*grid, bessel_values(params.x0, grid, &mut seed.rng()))
}

pub(crate) fn bessel_values(x0: f64, grid: &TimeGrid, rng: &mut SimRng) -> Vec<f64> {
    let mut w = [x0, 0.0, 0.0];
    let mut values = Vec::with_capacity(grid.len());
    values.push(x0);
    advance_norms(&mut w, grid, 0, grid.n_steps, rng, &mut values);
    values
}

fn advance_norms(
    w: &mut [f64; 3],
    grid: &TimeGrid,
    from: usize,
    to: usize,
    rng: &mut SimRng,
    out: &mut Vec<f64>,
) {
    for i in from..to {
        let s = (grid.time(i + 1) - grid.time(i)).sqrt();
        for c in w.iter_mut() {
            *c += s * normal(rng);
        }
        out.push((w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt());
    }
}

/// Two Bessel-3 paths from 1 that agree up to an exponential(2) split time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledBesselSample {
    pub y1: GridPath,
    pub y2: GridPath,
    pub tau: f64,
    /// First grid index at or after `tau` (`None` when `tau` is past the grid).
    pub split_index: Option<usize>,
}

/// Samples the coupled pair. The split is realized at the first grid point
/// at or after `tau`; afterwards the second path continues from the shared
/// three-dimensional position with independent increments.
pub fn sample_coupled_pair(grid: &TimeGrid, seed: SeedSpec) -> Result<CoupledBesselSample> {
    let mut rng = seed.rng();
    let tau = 0.5 * exp1(&mut rng);
    let split_index = grid.first_index_at_or_after(grid.t_start + tau);
    let mut w1 = [1.0, 0.0, 0.0];
    let mut v1 = Vec::with_capacity(grid.len());
    v1.push(1.0);
    let k = split_index.unwrap_or(grid.n_steps);
    advance_norms(&mut w1, grid, 0, k, &mut rng, &mut v1);
    let mut v2 = v1.clone();
    let mut w2 = w1;
    advance_norms(&mut w1, grid, k, grid.n_steps, &mut rng, &mut v1);
    advance_norms(&mut w2, grid, k, grid.n_steps, &mut rng, &mut v2);
    Ok(CoupledBesselSample {
        y1: GridPath::new(*grid, v1)?,
        y2: GridPath::new(*grid, v2)?,
        tau,
        split_index,
    })
}

/// Proposal for a split time whose target law is exponential(2) restricted
/// to `[0, horizon]`: an equal mixture of the truncated exponential and the
/// uniform law on `[0, horizon]`.
///
/// The functionals below carry a factor `e^{2τ}` that cancels the
/// exponential density, so their mass is spread over the whole horizon; the
/// uniform component keeps late split times represented.
#[derive(Debug, Clone, Copy)]
pub struct SplitTimeProposal {
    horizon: f64,
    trunc_mass: f64,
}

impl SplitTimeProposal {
    pub fn new(horizon: f64) -> Self {
        SplitTimeProposal {
            horizon,
            trunc_mass: -(-2.0 * horizon).exp_m1(),
        }
    }

    /// Draws `τ` and returns `(τ, 2e^{-2τ} / q(τ))`, the likelihood ratio of
    /// the exponential(2) law (restricted to the horizon) to the proposal.
    #[inline]
    pub fn sample(&self, rng: &mut SimRng) -> (f64, f64) {
        let pick = uniform(rng);
        let u = uniform(rng);
        let tau = if pick < 0.5 {
            -(-u * self.trunc_mass).ln_1p() / 2.0
        } else {
            u * self.horizon
        };
        let target = 2.0 * (-2.0 * tau).exp();
        let q = 0.5 * target / self.trunc_mass + 0.5 / self.horizon;
        (tau, target / q)
    }
}

/// Slope `√2 − (3/(2√2)) log(t)/t + y/t`; kept local to avoid a dependency
/// cycle with the barrier module's domain checks.
fn lemma_beta(t: f64, y: f64) -> f64 {
    SQRT_2 - 3.0 / (2.0 * SQRT_2) * t.ln() / t + y / t
}

/// Monte Carlo estimate of
/// `E[Y¹_τ e^{2τ − (3 log t/(2t))τ − βY¹_τ} 1{1≤Y¹_t≤2} 1{1≤Y²_t≤2} 1{τ≤t}]`
/// over the coupled pair.
///
/// Each draw samples `τ` and `Y¹_τ` exactly; given those, the two endpoint
/// indicators are conditionally independent and are replaced by their exact
/// conditional probabilities.
pub fn lemma22_functional_estimate(t: f64, y: f64, n: u64, seed: SeedSpec) -> Result<MonteCarloEstimate> {
    if !(t > 1.0) {
        return Err(Error::Domain {
            what: "t",
            value: t,
            domain: "(1, inf)".into(),
        });
    }
    check_nonneg("y", y)?;
    if n == 0 {
        return Err(Error::arg("n", "need at least one sample"));
    }
    let beta = lemma_beta(t, y);
    let decay = 3.0 * t.ln() / (2.0 * t);
    let proposal = SplitTimeProposal::new(t);
    Ok(parallel_mean(n, seed, |_, rng| {
        let (tau, lr) = proposal.sample(rng);
        let x = bessel_step(1.0, tau, rng);
        let p = window_probability(x, t - tau, 1.0, 2.0);
        // e^{2τ} from the functional cancels with 2e^{-2τ} inside lr
        lr * x * (2.0 * tau - decay * tau - beta * x).exp() * p * p
    }))
}

/// The two shifted windows and horizon for the persistence functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma23Params {
    pub s: f64,
    pub t: f64,
    pub a_st: f64,
}

impl Lemma23Params {
    /// Requires `e ≤ s ≤ t ≤ 2s`.
    pub fn new(s: f64, t: f64) -> Result<Self> {
        if !(E <= s && s <= t && t <= 2.0 * s) {
            return Err(Error::arg("s", format!("need e <= s <= t <= 2s, got s={s}, t={t}")));
        }
        let k = 1.0 / (2.0 * SQRT_2);
        Ok(Lemma23Params {
            s,
            t,
            a_st: k * s.ln() - k * t.ln() / t * s,
        })
    }

    pub fn beta_t(&self) -> f64 {
        SQRT_2 - self.t.ln() / (2.0 * SQRT_2 * self.t)
    }

    /// The two terms `e^{−(log t/(2t))s} t^{−5/2}` and
    /// `e^{−(log t/(2t))s} t^{−3/2}(t−s+1)^{−3/2}` of the bound shape.
    pub fn bound_terms(&self) -> (f64, f64) {
        let (s, t) = (self.s, self.t);
        let damp = (-t.ln() / (2.0 * t) * s).exp();
        (damp * t.powf(-2.5), damp * t.powf(-1.5) * (t - s + 1.0).powf(-1.5))
    }
}

/// Monte Carlo estimate of
/// `E[Y¹_τ e^{2τ − (log t/(2t))τ − β_t Y¹_τ} 1{a+1 ≤ Y¹_s ≤ a+2} 1{1 ≤ Y²_t ≤ 2} 1{τ≤s}]`,
/// with the same conditioning device as [`lemma22_functional_estimate`].
pub fn lemma23_functional_estimate(params: Lemma23Params, n: u64, seed: SeedSpec) -> Result<MonteCarloEstimate> {
    let Lemma23Params { s, t, a_st } = Lemma23Params::new(params.s, params.t)?;
    if n == 0 {
        return Err(Error::arg("n", "need at least one sample"));
    }
    let beta_t = params.beta_t();
    let decay = t.ln() / (2.0 * t);
    let proposal = SplitTimeProposal::new(s);
    Ok(parallel_mean(n, seed, |_, rng| {
        let (tau, lr) = proposal.sample(rng);
        let x = bessel_step(1.0, tau, rng);
        let p_s = if s - tau > 0.0 {
            window_probability(x, s - tau, a_st + 1.0, a_st + 2.0)
        } else {
            f64::from(u8::from(a_st + 1.0 <= x && x <= a_st + 2.0))
        };
        let p_t = window_probability(x, t - tau, 1.0, 2.0);
        lr * x * (2.0 * tau - decay * tau - beta_t * x).exp() * p_s * p_t
    }))
}
