//! Spine estimators: first moments over a single Bessel-conditioned path,
//! second moments over two paths sharing a common stem, the quadrature form
//! of `E[H(y,t)]` and the Paley–Zygmund lower bound built from them.

use serde::{Deserialize, Serialize};

use crate::barriers::{beta, Curve, CurvePoint};
use crate::bessel::{bessel_step, bessel_values, density_unchecked, log_tilted_window_mean, sample_coupled_pair, SplitTimeProposal};
use crate::error::{Error, Result};
use crate::quadrature::integrate;
use crate::stats::{parallel_log_mean, parallel_mean, MonteCarloEstimate};
use crate::stochastic::{GridPath, SeedSpec, TimeGrid};

/// `inner(s) − shift`, used to turn a barrier with a positive intercept into
/// a curve through the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftedCurve<C> {
    pub inner: C,
    pub shift: f64,
}

impl<C: Curve> ShiftedCurve<C> {
    /// Shifts `inner` so that it starts at zero.
    pub fn through_origin(inner: C) -> Self {
        let shift = inner.level(0.0);
        ShiftedCurve { inner, shift }
    }
}

impl<C: Curve> Curve for ShiftedCurve<C> {
    #[inline]
    fn point(&self, s: f64) -> CurvePoint {
        let p = self.inner.point(s);
        CurvePoint {
            level: p.level - self.shift,
            ..p
        }
    }

    fn domain_end(&self) -> f64 {
        self.inner.domain_end()
    }
}

/// Weight of the one-spine change of measure evaluated on a path of `ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpineWeightState {
    pub alpha: f64,
    /// `∫ f′ dξ` over the path.
    pub stochastic_integral: f64,
    /// `½ ∫ f′² ds`.
    pub drift_energy: f64,
    /// `log ζ(t)`; `-inf` once the path has touched `α + f`.
    pub log_zeta: f64,
}

impl SpineWeightState {
    /// Evaluates `ζ` at the end of `xi`, computing `∫ f′ dξ` as
    /// `f′(t)ξ_t − f′(0)ξ_0 − ∫ f″ ξ ds` with the trapezoid rule for the last
    /// integral. `drift_energy` is `½ ∫₀ᵗ f′² ds`.
    pub fn from_path<C: Curve + ?Sized>(alpha: f64, f: &C, xi: &GridPath, drift_energy: f64) -> Self {
        let g = &xi.grid;
        let mut curv_integral = 0.0;
        let mut prev = f.point(g.time(0)).curvature * xi.values[0];
        let mut touched = alpha + f.level(g.time(0)) - xi.values[0] <= 0.0;
        for i in 1..g.len() {
            let s = g.time(i);
            let p = f.point(s);
            let cur = p.curvature * xi.values[i];
            curv_integral += 0.5 * (prev + cur) * (s - g.time(i - 1));
            prev = cur;
            touched |= alpha + p.level - xi.values[i] <= 0.0;
        }
        let end = f.point(g.t_end);
        let start = f.point(g.t_start);
        let stochastic_integral = end.slope * xi.last() - start.slope * xi.first() - curv_integral;
        let gap = alpha + end.level - xi.last();
        let log_zeta = if touched {
            f64::NEG_INFINITY
        } else {
            (gap / alpha).ln() + stochastic_integral - drift_energy
        };
        SpineWeightState {
            alpha,
            stochastic_integral,
            drift_energy,
            log_zeta,
        }
    }
}

/// Left-point Itô sum `Σ f′(s_i)(ξ_{i+1} − ξ_i)`.
pub fn ito_sum<C: Curve + ?Sized>(f: &C, xi: &GridPath) -> f64 {
    let g = &xi.grid;
    (0..g.n_steps)
        .map(|i| f.point(g.time(i)).slope * (xi.values[i + 1] - xi.values[i]))
        .sum()
}

/// `½ ∫₀ᵗ f′(s)² ds`.
pub fn drift_energy<C: Curve + ?Sized>(f: &C, t: f64) -> Result<f64> {
    let v = integrate(|s| f.point(s).slope.powi(2), 0.0, t, 1e-13, 1e-12)?;
    Ok(0.5 * v)
}

fn check_spine_inputs<C: Curve + ?Sized>(alpha: f64, f: &C, grid: &TimeGrid, n: u64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::arg("alpha", format!("must be positive, got {alpha}")));
    }
    if grid.t_start != 0.0 {
        return Err(Error::InvalidGrid("spine grids start at time 0".into()));
    }
    if grid.t_end > f.domain_end() {
        return Err(Error::Domain {
            what: "t",
            value: grid.t_end,
            domain: format!("[0, {}]", f.domain_end()),
        });
    }
    if f.level(0.0).abs() > 1e-12 {
        return Err(Error::arg("f", "the curve must start at 0"));
    }
    if n == 0 {
        return Err(Error::arg("n", "need at least one sample"));
    }
    Ok(())
}

/// Estimates `E[Σ_{v ∈ N(t)} g(X_v) 1{X_v(s) < α + f(s) ∀ s ≤ t}]` as the
/// mean of `e^t g(ξ)/ζ(t)`, where `ξ_s = α + f(s) − Y_s` and `Y` is a Bessel-3
/// path from `α` sampled on `grid`.
pub fn many_to_one_estimate<G, C>(g: G, alpha: f64, f: &C, grid: &TimeGrid, n: u64, seed: SeedSpec) -> Result<MonteCarloEstimate>
where
    G: Fn(&GridPath) -> f64 + Sync,
    C: Curve + Sync + ?Sized,
{
    check_spine_inputs(alpha, f, grid, n)?;
    let t = grid.t_end;
    let energy = drift_energy(f, t)?;
    let levels: Vec<f64> = (0..grid.len()).map(|i| f.level(grid.time(i))).collect();
    let bad = std::sync::atomic::AtomicBool::new(false);
    let est = parallel_mean(n, seed, |_, rng| {
        let y = bessel_values(alpha, grid, rng);
        let xi: Vec<f64> = y.iter().zip(&levels).map(|(y, l)| alpha + l - y).collect();
        let xi = GridPath { grid: *grid, values: xi };
        let w = SpineWeightState::from_path(alpha, f, &xi, energy);
        if !w.log_zeta.is_finite() {
            bad.store(true, std::sync::atomic::Ordering::Relaxed);
            return 0.0;
        }
        let v = g(&xi);
        if v == 0.0 {
            0.0
        } else {
            v * (t - w.log_zeta).exp()
        }
    });
    if bad.into_inner() {
        return Err(Error::Degenerate("a spine path reached the barrier".into()));
    }
    Ok(est)
}

/// The slope `β(t, y)` after checking `y ∈ [0, √t]`.
fn h_slope(y: f64, t: f64) -> Result<f64> {
    if !(t >= 1.0) {
        return Err(Error::Domain {
            what: "t",
            value: t,
            domain: "[1, inf)".into(),
        });
    }
    if !(0.0..=t.sqrt()).contains(&y) {
        return Err(Error::Domain {
            what: "y",
            value: y,
            domain: format!("[0, {}]", t.sqrt()),
        });
    }
    beta(t, y)
}

/// `E[H(y,t)] = e^{t − β²t/2 − β} ∫₁² z⁻¹ e^{βz} p_t(1,z) dz`.
pub fn expected_h_quadrature(y: f64, t: f64) -> Result<f64> {
    let b = h_slope(y, t)?;
    let integral = integrate(
        |z| (b * z).exp() / z * density_unchecked(t, 1.0, z),
        1.0,
        2.0,
        1e-300,
        1e-13,
    )?;
    Ok((t - b * b * t / 2.0 - b).exp() * integral)
}

/// The two parts of `E[H(y,t)²]`: the same-particle term, equal to `E[H]`,
/// and a Monte Carlo estimate of the pair term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondMomentTerms {
    pub diagonal: f64,
    pub pairs: MonteCarloEstimate,
}

impl SecondMomentTerms {
    pub fn total(&self) -> MonteCarloEstimate {
        MonteCarloEstimate {
            mean: self.diagonal + self.pairs.mean,
            ..self.pairs
        }
    }
}

/// Log of one pair-term sample given the split time `tau`, its likelihood
/// ratio `lr` and the common position `x = Y¹_τ` of the two spines.
#[inline]
fn pair_log_weight(t: f64, b: f64, tau: f64, lr: f64, x: f64) -> f64 {
    let log_j = log_tilted_window_mean(x, t - tau, b, 1.0, 2.0);
    if !log_j.is_finite() {
        return f64::NEG_INFINITY;
    }
    // e^{2t} · e^τ ζ¹(τ) · (e^{−β−β²t/2})² J(x, t−τ)², with
    // ζ¹(τ) = x e^{β(1+βτ−x) − β²τ/2}
    2.0 * t + lr.ln() + tau + x.ln() + b * (1.0 + b * tau - x) - b * b * tau / 2.0 - 2.0 * b - b * b * t
        + 2.0 * log_j
}

/// Second moment of `H(y,t)` split into its two terms.
///
/// Given the split time `T ≤ t` and the common position `Y¹_T`, the two
/// spines end independently, so each pair sample integrates their endpoints
/// in closed form. `T` is drawn from [`SplitTimeProposal`].
pub fn second_moment_terms(y: f64, t: f64, n: u64, seed: SeedSpec) -> Result<SecondMomentTerms> {
    let b = h_slope(y, t)?;
    if n == 0 {
        return Err(Error::arg("n", "need at least one sample"));
    }
    let diagonal = expected_h_quadrature(y, t)?;
    let proposal = SplitTimeProposal::new(t);
    let pairs = parallel_log_mean(n, seed, |_, rng| {
        let (tau, lr) = proposal.sample(rng);
        let x = bessel_step(1.0, tau, rng);
        pair_log_weight(t, b, tau, lr, x)
    });
    Ok(SecondMomentTerms { diagonal, pairs })
}

/// Estimate of `E[H(y,t)²]`.
pub fn second_moment_h_estimate(y: f64, t: f64, n: u64, seed: SeedSpec) -> Result<MonteCarloEstimate> {
    Ok(second_moment_terms(y, t, n, seed)?.total())
}

/// Two spines on a grid for the linear barrier `βs + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSpineSample {
    pub xi1: GridPath,
    pub xi2: GridPath,
    /// Exponential(2) split time.
    pub split_time: f64,
    /// Grid time at which the paths actually separate.
    pub realized_split: Option<f64>,
    pub log_zeta1_t: f64,
    pub log_zeta2_t: f64,
    /// `log ζ¹` at the realized split (or at `t` when there is none).
    pub log_zeta1_split: f64,
}

/// Builds `ξⁱ_s = 1 + βs − Yⁱ_s` from a coupled Bessel pair, so the second
/// spine continues from the first one's distance to the barrier.
pub fn sample_two_spines(y: f64, grid: &TimeGrid, seed: SeedSpec) -> Result<TwoSpineSample> {
    let t = grid.t_end;
    let b = h_slope(y, t)?;
    let pair = sample_coupled_pair(grid, seed)?;
    let to_xi = |p: &GridPath| -> Result<GridPath> {
        let v = p.values.iter().enumerate().map(|(i, v)| 1.0 + b * grid.time(i) - v).collect();
        GridPath::new(*grid, v)
    };
    let log_zeta = |yv: f64, xi: f64, s: f64| yv.ln() + b * xi - b * b * s / 2.0;
    let xi1 = to_xi(&pair.y1)?;
    let xi2 = to_xi(&pair.y2)?;
    let k = pair.split_index.unwrap_or(grid.n_steps);
    Ok(TwoSpineSample {
        log_zeta1_t: log_zeta(pair.y1.last(), xi1.last(), t),
        log_zeta2_t: log_zeta(pair.y2.last(), xi2.last(), t),
        log_zeta1_split: log_zeta(pair.y1.values[k], xi1.values[k], grid.time(k)),
        realized_split: pair.split_index.map(|i| grid.time(i)),
        split_time: pair.tau,
        xi1,
        xi2,
    })
}

impl TwoSpineSample {
    /// `e^{2t} e^T ζ¹(T)/(ζ¹(t)ζ²(t))` times the two endpoint-window
    /// indicators, or 0 when the spines have not separated by `t`.
    pub fn pair_weight(&self, beta: f64) -> f64 {
        let Some(split) = self.realized_split else { return 0.0 };
        let t = self.xi1.grid.t_end;
        let inside = |x: f64| (beta * t - 1.0..=beta * t).contains(&x);
        if !(inside(self.xi1.last()) && inside(self.xi2.last())) {
            return 0.0;
        }
        (2.0 * t + split + self.log_zeta1_split - self.log_zeta1_t - self.log_zeta2_t).exp()
    }
}

/// `P(H ≠ 0) ≥ E[H]² / E[H²]`, clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaleyZygmund {
    pub bound: f64,
    /// Delta-method standard error inherited from the second moment.
    pub stderr: f64,
    pub first_moment: f64,
    pub second_moment: MonteCarloEstimate,
}

pub fn paley_zygmund_lower_bound(y: f64, t: f64, n: u64, seed: SeedSpec) -> Result<PaleyZygmund> {
    let first = expected_h_quadrature(y, t)?;
    let second = second_moment_h_estimate(y, t, n, seed)?;
    if !(second.mean > 0.0) {
        return Err(Error::Degenerate(format!(
            "second moment estimate is {} at y={y}, t={t}; increase n",
            second.mean
        )));
    }
    let raw = first * first / second.mean;
    Ok(PaleyZygmund {
        bound: raw.clamp(0.0, 1.0),
        stderr: raw * second.stderr / second.mean,
        first_moment: first,
        second_moment: second,
    })
}
