//! Space-time curves: the straight lines `βs + α` and the curved barrier
//! `βs + L(s) + y + 1`, where `L` is a C² smoothing of the logarithmic tent
//! `l(s) = (3/(2√2)) log(min(s, t-s) + 1)`.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `3 / (2√2)`, the coefficient of the logarithmic correction.
pub const LOG_CORRECTION: f64 = 3.0 / (2.0 * SQRT_2);

/// Smallest horizon for which the curved barrier is built.
pub const CURVED_T_MIN: f64 = 8.0;

/// Slope `√2 − (3/(2√2)) log(t)/t + y/t` of the lower-bound line.
pub fn beta(t: f64, y: f64) -> Result<f64> {
    if !(t >= 1.0) {
        return Err(Error::Domain {
            what: "t",
            value: t,
            domain: "[1, inf)".into(),
        });
    }
    if !(y >= 0.0) {
        return Err(Error::Domain {
            what: "y",
            value: y,
            domain: "[0, inf)".into(),
        });
    }
    Ok(SQRT_2 - LOG_CORRECTION * t.ln() / t + y / t)
}

/// Slope `√2 − (1/(2√2)) log(t)/t` used for the persistence counts.
pub fn beta_t(t: f64) -> Result<f64> {
    if !(t >= 1.0) {
        return Err(Error::Domain {
            what: "t",
            value: t,
            domain: "[1, inf)".into(),
        });
    }
    Ok(SQRT_2 - t.ln() / (2.0 * SQRT_2 * t))
}

fn check_in_horizon(s: f64, t: f64) -> Result<()> {
    if !(0.0..=t).contains(&s) {
        return Err(Error::Domain {
            what: "s",
            value: s,
            domain: format!("[0, {t}]"),
        });
    }
    Ok(())
}

/// The logarithmic tent `l(s)` on `[0, t]`.
pub fn l_curve(s: f64, t: f64) -> Result<f64> {
    check_in_horizon(s, t)?;
    Ok(LOG_CORRECTION * (s.min(t - s) + 1.0).ln())
}

/// Value, first and second derivative of a curve at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level: f64,
    pub slope: f64,
    pub curvature: f64,
}

/// C² version of [`l_curve`].
///
/// Off `[t/2 − 1, t/2 + 1]` it is `l` itself. On the left half of that
/// window the second derivative is `l″(t/2 − 1)` minus a raised-cosine bump
/// sized so the slope reaches zero at `t/2`; the right half is the mirror
/// image. Peak curvature is below `4.25/t` in magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothLogCurve {
    pub t: f64,
    window_start: f64,
    l_a: f64,
    l1_a: f64,
    l2_a: f64,
    bump: f64,
}

impl SmoothLogCurve {
    pub fn new(t: f64) -> Result<Self> {
        if !(t >= CURVED_T_MIN) || !t.is_finite() {
            return Err(Error::Construction(format!(
                "smoothed curve needs t >= {CURVED_T_MIN}, got {t}"
            )));
        }
        let half = t / 2.0;
        let curve = SmoothLogCurve {
            t,
            window_start: half - 1.0,
            l_a: LOG_CORRECTION * half.ln(),
            l1_a: LOG_CORRECTION / half,
            l2_a: -LOG_CORRECTION / (half * half),
            bump: LOG_CORRECTION / half - LOG_CORRECTION / (half * half),
        };
        let worst = curve.max_abs_curvature();
        if worst > 10.0 / t || curve.bump < 0.0 {
            return Err(Error::Construction(format!(
                "curvature bound violated: |L''| reaches {worst} > {}",
                10.0 / t
            )));
        }
        Ok(curve)
    }

    /// `|L″|` at the centre of each half-window, where it peaks.
    pub fn max_abs_curvature(&self) -> f64 {
        -self.l2_a + 2.0 * self.bump
    }

    pub fn window(&self) -> (f64, f64) {
        (self.window_start, self.window_start + 2.0)
    }

    fn left_half(&self, w: f64) -> CurvePoint {
        let tau = 2.0 * PI;
        let (sin, cos) = (tau * w).sin_cos();
        CurvePoint {
            level: self.l_a + self.l1_a * w + 0.5 * self.l2_a * w * w
                - self.bump * (0.5 * w * w - (1.0 - cos) / (tau * tau)),
            slope: self.l1_a + self.l2_a * w - self.bump * (w - sin / tau),
            curvature: self.l2_a - self.bump * (1.0 - cos),
        }
    }

    pub fn eval(&self, s: f64) -> Result<CurvePoint> {
        check_in_horizon(s, self.t)?;
        Ok(self.eval_unchecked(s))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, s: f64) -> CurvePoint {
        let t = self.t;
        let mirrored = s > t / 2.0;
        let r = if mirrored { t - s } else { s };
        let p = if r <= self.window_start {
            let d = r + 1.0;
            CurvePoint {
                level: LOG_CORRECTION * d.ln(),
                slope: LOG_CORRECTION / d,
                curvature: -LOG_CORRECTION / (d * d),
            }
        } else {
            self.left_half(r - self.window_start)
        };
        if mirrored {
            CurvePoint {
                slope: -p.slope,
                ..p
            }
        } else {
            p
        }
    }
}

/// `(L(s), L′(s), L″(s))` for horizon `t`.
pub fn l_smooth(s: f64, t: f64) -> Result<(f64, f64, f64)> {
    let p = SmoothLogCurve::new(t)?.eval(s)?;
    Ok((p.level, p.slope, p.curvature))
}

/// A curve `s ↦ level(s)` with two derivatives on `[0, domain_end]`.
pub trait Curve {
    fn point(&self, s: f64) -> CurvePoint;

    fn domain_end(&self) -> f64;

    fn level(&self, s: f64) -> f64 {
        self.point(s).level
    }
}

/// The line `slope · s + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearBarrier {
    pub slope: f64,
    pub offset: f64,
}

impl LinearBarrier {
    pub fn new(slope: f64, offset: f64) -> Result<Self> {
        if !(slope > 0.0) || !slope.is_finite() || !offset.is_finite() {
            return Err(Error::arg(
                "slope",
                format!("need a positive finite slope and finite offset, got ({slope}, {offset})"),
            ));
        }
        Ok(LinearBarrier { slope, offset })
    }

    /// The lower-bound line `β(t,y) s + 1`.
    pub fn lower_bound_line(t: f64, y: f64) -> Result<Self> {
        LinearBarrier::new(beta(t, y)?, 1.0)
    }

    /// The persistence line `β_t s + 1`.
    pub fn persistence_line(t: f64) -> Result<Self> {
        LinearBarrier::new(beta_t(t)?, 1.0)
    }
}

impl Curve for LinearBarrier {
    #[inline]
    fn point(&self, s: f64) -> CurvePoint {
        CurvePoint {
            level: self.slope * s + self.offset,
            slope: self.slope,
            curvature: 0.0,
        }
    }

    fn domain_end(&self) -> f64 {
        f64::INFINITY
    }
}

/// `β(t,y) s + L(s) + y + 1` on `[0, t]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvedBarrier {
    pub t_horizon: f64,
    pub y: f64,
    pub slope: f64,
    pub smoothing: SmoothLogCurve,
}

impl CurvedBarrier {
    pub fn new(t_horizon: f64, y: f64) -> Result<Self> {
        Ok(CurvedBarrier {
            t_horizon,
            y,
            slope: beta(t_horizon, y)?,
            smoothing: SmoothLogCurve::new(t_horizon)?,
        })
    }
}

impl Curve for CurvedBarrier {
    #[inline]
    fn point(&self, s: f64) -> CurvePoint {
        let p = self.smoothing.eval_unchecked(s.clamp(0.0, self.t_horizon));
        CurvePoint {
            level: self.slope * s + p.level + self.y + 1.0,
            slope: self.slope + p.slope,
            curvature: p.curvature,
        }
    }

    fn domain_end(&self) -> f64 {
        self.t_horizon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Barrier {
    Linear(LinearBarrier),
    Curved(CurvedBarrier),
}

impl Curve for Barrier {
    #[inline]
    fn point(&self, s: f64) -> CurvePoint {
        match self {
            Barrier::Linear(b) => b.point(s),
            Barrier::Curved(b) => b.point(s),
        }
    }

    fn domain_end(&self) -> f64 {
        match self {
            Barrier::Linear(b) => b.domain_end(),
            Barrier::Curved(b) => b.domain_end(),
        }
    }
}

impl From<LinearBarrier> for Barrier {
    fn from(b: LinearBarrier) -> Self {
        Barrier::Linear(b)
    }
}

impl From<CurvedBarrier> for Barrier {
    fn from(b: CurvedBarrier) -> Self {
        Barrier::Curved(b)
    }
}

/// Barrier value at `s`, rejecting times outside the barrier's domain.
pub fn barrier_level<C: Curve + ?Sized>(b: &C, s: f64) -> Result<f64> {
    if !(s >= 0.0 && s <= b.domain_end()) {
        return Err(Error::Domain {
            what: "s",
            value: s,
            domain: format!("[0, {}]", b.domain_end()),
        });
    }
    Ok(b.level(s))
}

/// Closed interval `[lo, hi]` of terminal positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::arg("window", format!("need finite lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Window { lo, hi })
    }

    /// `[slope·t − 1, slope·t]`, the terminal window for the straight-line counts.
    pub fn below_line_end(slope: f64, t: f64) -> Result<Self> {
        Window::new(slope * t - 1.0, slope * t)
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}
