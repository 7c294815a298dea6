//! Experiment drivers, their configuration and the JSON/CSV reports.

use std::collections::BTreeMap;
use std::f64::consts::SQRT_2;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barriers::{LinearBarrier, Window, LOG_CORRECTION};
use crate::bbm::{max_at, simulate_bbm, CountSpec, CountTarget, StreamConfig, StreamEngine, StreamOutcome, DEFAULT_CAP};
use crate::bessel::{bessel_density, bessel_density_bounds, lemma22_functional_estimate, lemma23_functional_estimate, window_probability, Lemma23Params};
use crate::error::{Error, Result};
use crate::stats::{bootstrap_median, ols_fit, proportion, upper_median, wilson_interval, FitResult, MeanAccumulator, MonteCarloEstimate};
use crate::stochastic::{name_hash, SeedSpec, TimeGrid};

/// Largest tolerated fraction of replicates stopped by the particle cap.
pub const MAX_DISCARD_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Median,
    Tail,
    Persistence,
    Fluctuation,
    Lemmas,
    Selftest,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Median => "median",
            Experiment::Tail => "tail",
            Experiment::Persistence => "persistence",
            Experiment::Fluctuation => "fluctuation",
            Experiment::Lemmas => "lemmas",
            Experiment::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Time grid; the horizon for fluctuation runs.
    pub t: Vec<f64>,
    /// Offsets for tail runs.
    pub y: Vec<f64>,
    pub reps: u64,
    pub dt: f64,
    /// Grid step for spine paths.
    pub spine_dt: f64,
    /// Monte Carlo samples for the Bessel functionals.
    pub samples: u64,
    pub cap: u64,
    pub seed: u64,
    pub bridge_correction: bool,
    pub jobs: Option<usize>,
    /// Spacing of observation times for fluctuation runs and `I_n`.
    pub lattice: f64,
    /// Start of the fluctuation window.
    pub window_start: f64,
    /// Values of `n` for the lattice estimate of `I_n`.
    pub n_values: Vec<f64>,
    pub prune_epsilon: Option<f64>,
    pub bootstrap_resamples: usize,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            experiment,
            t: Vec::new(),
            y: Vec::new(),
            reps: 1,
            dt: 0.02,
            spine_dt: 0.005,
            samples: 1_000_000,
            cap: DEFAULT_CAP,
            seed: 1,
            bridge_correction: true,
            jobs: None,
            lattice: 0.25,
            window_start: 6.0,
            n_values: Vec::new(),
            prune_epsilon: Some(1e-5),
            bootstrap_resamples: 1000,
            out: None,
        };
        match experiment {
            Experiment::Median => ExperimentConfig {
                t: vec![4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0],
                reps: 2000,
                ..base
            },
            Experiment::Tail => ExperimentConfig {
                t: vec![10.0],
                y: vec![0.0, 1.0, 2.0, 3.0],
                reps: 20_000,
                ..base
            },
            Experiment::Persistence => ExperimentConfig {
                t: vec![5.0, 10.0, 20.0],
                reps: 2000,
                n_values: vec![5.0],
                ..base
            },
            Experiment::Fluctuation => ExperimentConfig {
                t: vec![12.0],
                reps: 50,
                ..base
            },
            Experiment::Lemmas => ExperimentConfig {
                t: vec![5.0, 10.0, 20.0, 40.0],
                ..base
            },
            Experiment::Selftest => base,
        }
    }

    /// Defaults for `experiment` overlaid with the fields present in `file`.
    pub fn from_json_overlay(experiment: Experiment, file: &str) -> Result<Self> {
        let mut value = serde_json::to_value(ExperimentConfig::defaults(experiment))
            .map_err(|e| Error::arg("config", e.to_string()))?;
        let overlay: serde_json::Value =
            serde_json::from_str(file).map_err(|e| Error::arg("config", format!("invalid JSON: {e}")))?;
        let serde_json::Value::Object(fields) = overlay else {
            return Err(Error::arg("config", "expected a JSON object"));
        };
        let target = value.as_object_mut().expect("config serializes to an object");
        for (k, v) in fields {
            target.insert(k, v);
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::arg("config", e.to_string()))?;
        if cfg.experiment != experiment {
            return Err(Error::arg(
                "config",
                format!("file describes `{}`, command is `{}`", cfg.experiment.name(), experiment.name()),
            ));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.experiment;
        if e != Experiment::Selftest && self.t.is_empty() {
            return Err(Error::arg("t", "the time grid is empty"));
        }
        if self.t.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::arg("t", "times must be positive and finite"));
        }
        if self.reps == 0 {
            return Err(Error::arg("reps", "need at least one replicate"));
        }
        if self.samples == 0 {
            return Err(Error::arg("samples", "need at least one sample"));
        }
        if !(self.dt > 0.0) || !(self.spine_dt > 0.0) {
            return Err(Error::arg("dt", "must be positive"));
        }
        if self.cap == 0 {
            return Err(Error::arg("cap", "must be at least 1"));
        }
        if !(self.lattice > 0.0) {
            return Err(Error::arg("lattice", "must be positive"));
        }
        if let Some(eps) = self.prune_epsilon {
            if !(eps > 0.0) {
                return Err(Error::arg("prune_epsilon", "must be positive"));
            }
        }
        match e {
            Experiment::Tail => {
                if self.y.is_empty() {
                    return Err(Error::arg("y", "the offset grid is empty"));
                }
                for &t in &self.t {
                    if let Some(y) = self.y.iter().find(|y| !(0.0..=t.sqrt()).contains(*y)) {
                        return Err(Error::arg("y", format!("offset {y} outside [0, sqrt({t})]")));
                    }
                }
            }
            Experiment::Fluctuation => {
                let h = self.t[self.t.len() - 1];
                if h < 6.0 || !(self.window_start > 1.0) || self.window_start >= h {
                    return Err(Error::arg(
                        "t",
                        format!("need horizon >= 6 and 1 < window start < horizon, got {h} and {}", self.window_start),
                    ));
                }
            }
            Experiment::Lemmas => {
                if let Some(t) = self.t.iter().find(|t| !(5.0..=40.0).contains(*t)) {
                    return Err(Error::arg("t", format!("lemma sweeps use t in [5, 40], got {t}")));
                }
            }
            Experiment::Persistence | Experiment::Median => {
                if let Some(t) = self.t.iter().find(|t| **t < 1.0) {
                    return Err(Error::arg("t", format!("times must be at least 1, got {t}")));
                }
                if self.n_values.iter().any(|n| !(*n >= 1.0)) {
                    return Err(Error::arg("n_values", "values of n must be at least 1"));
                }
            }
            Experiment::Selftest => {}
        }
        Ok(())
    }
}

/// One estimated quantity at one design point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub quantity: String,
    pub t: f64,
    pub y: Option<f64>,
    pub estimate: f64,
    pub stderr: f64,
    pub n: u64,
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedFit {
    pub name: String,
    /// The regression, written as `response ~ a + b * regressor`.
    pub design: String,
    pub fit: FitResult,
}

/// Base stream of a named sub-experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub stream: String,
    pub stream_hash: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub version: String,
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub fits: Vec<NamedFit>,
    /// Scalar summaries keyed by name.
    pub summary: BTreeMap<String, f64>,
    pub discarded: u64,
    pub discard_rate: f64,
    pub seeds: Vec<SeedEntry>,
    pub notes: Vec<String>,
    /// Experiment-specific tables.
    pub details: serde_json::Value,
    pub wall_clock_seconds: f64,
}

impl ExperimentReport {
    fn new(config: &ExperimentConfig) -> Self {
        ExperimentReport {
            experiment: config.experiment,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            rows: Vec::new(),
            fits: Vec::new(),
            summary: BTreeMap::new(),
            discarded: 0,
            discard_rate: 0.0,
            seeds: Vec::new(),
            notes: Vec::new(),
            details: serde_json::Value::Null,
            wall_clock_seconds: 0.0,
        }
    }

    fn stream(&mut self, name: String) -> String {
        self.seeds.push(SeedEntry {
            stream_hash: name_hash(&name),
            stream: name.clone(),
        });
        name
    }

    fn row(&mut self, quantity: &str, t: f64, y: Option<f64>, est: MonteCarloEstimate, ci: Option<(f64, f64)>) {
        self.rows.push(ReportRow {
            quantity: quantity.to_string(),
            t,
            y,
            estimate: est.mean,
            stderr: est.stderr,
            n: est.n,
            ci,
        });
    }

    pub fn rows_named<'a>(&'a self, quantity: &'a str) -> impl Iterator<Item = &'a ReportRow> + 'a {
        self.rows.iter().filter(move |r| r.quantity == quantity)
    }

    pub fn fit(&self, name: &str) -> Option<&FitResult> {
        self.fits.iter().find(|f| f.name == name).map(|f| &f.fit)
    }

    /// The report as JSON with every float written to 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, SignificantDigits);
        self.serialize(&mut ser).expect("report serializes");
        String::from_utf8(buf).expect("JSON is UTF-8")
    }

    /// `experiment,t,y,estimate,stderr,n`, one line per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("experiment,t,y,estimate,stderr,n\n");
        for r in &self.rows {
            let y = r.y.map(fmt_f64).unwrap_or_default();
            let _ = writeln!(
                s,
                "{}/{},{},{},{},{},{}",
                self.experiment.name(),
                r.quantity,
                fmt_f64(r.t),
                y,
                fmt_f64(r.estimate),
                fmt_f64(r.stderr),
                r.n
            );
        }
        s
    }

    /// Writes `<out>.json` and `<out>.csv`; a trailing `.json` on `out` is dropped.
    pub fn write(&self, out: &Path) -> io::Result<(PathBuf, PathBuf)> {
        let base = if out.extension().is_some_and(|e| e == "json") {
            out.with_extension("")
        } else {
            out.to_path_buf()
        };
        let json = base.with_extension("json");
        let csv = base.with_extension("csv");
        std::fs::write(&json, self.to_json())?;
        std::fs::write(&csv, self.to_csv())?;
        Ok((json, csv))
    }
}

/// 17 significant digits; non-finite values are written empty.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        String::new()
    }
}

struct SignificantDigits;

impl serde_json::ser::Formatter for SignificantDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

fn run_replicates(engine: &StreamEngine, master: u64, stream: &str, reps: u64) -> (Vec<StreamOutcome>, u64) {
    let all: Vec<StreamOutcome> = (0..reps)
        .into_par_iter()
        .map(|k| engine.run(SeedSpec::for_replicate(master, stream, k)))
        .collect();
    let total = all.len();
    let kept: Vec<StreamOutcome> = all.into_iter().filter(|o| !o.truncated).collect();
    let discarded = (total - kept.len()) as u64;
    (kept, discarded)
}

fn record_discards(report: &mut ExperimentReport, discarded: u64, total: u64) -> Result<()> {
    report.discarded += discarded;
    let runs = total.max(1) as f64;
    report.discard_rate = report.discard_rate.max(discarded as f64 / runs);
    if discarded as f64 / runs > MAX_DISCARD_RATE {
        return Err(Error::Experiment(format!(
            "{discarded} of {total} replicates hit the particle cap (limit {:.0}%)",
            100.0 * MAX_DISCARD_RATE
        )));
    }
    Ok(())
}

/// `√2 t − (3/(2√2)) log t`.
pub fn log_centering(t: f64) -> f64 {
    SQRT_2 * t - LOG_CORRECTION * t.ln()
}

/// Empirical medians of `M_t` with bootstrap intervals, and the fit
/// `median − √2 t = a + b log t`.
pub fn run_median_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut report = ExperimentReport::new(config);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut per_t = Vec::new();
    for &t in &config.t {
        let engine = StreamEngine::new(StreamConfig {
            cap: config.cap,
            max_times: vec![t],
            ..StreamConfig::new(t, config.dt)
        })?;
        let stream = report.stream(format!("median/t={t}"));
        let (runs, discarded) = run_replicates(&engine, config.seed, &stream, config.reps);
        record_discards(&mut report, discarded, config.reps)?;
        let maxima: Vec<f64> = runs.iter().map(|o| o.maxima[0]).collect();
        let boot_stream = report.stream(format!("median/bootstrap/t={t}"));
        let mut rng = SeedSpec::for_replicate(config.seed, &boot_stream, 0).rng();
        let boot = bootstrap_median(&maxima, config.bootstrap_resamples, &mut rng)
            .ok_or_else(|| Error::Experiment(format!("no complete replicates at t={t}")))?;
        let est = MonteCarloEstimate {
            mean: boot.estimate,
            stderr: boot.stderr,
            n: maxima.len() as u64,
            seed: SeedSpec::for_replicate(config.seed, &stream, 0),
        };
        report.row("median", t, None, est, Some((boot.ci_lo, boot.ci_hi)));
        report.row(
            "median_minus_centering",
            t,
            None,
            MonteCarloEstimate {
                mean: boot.estimate - log_centering(t),
                ..est
            },
            None,
        );
        xs.push(t.ln());
        ys.push(boot.estimate - SQRT_2 * t);
        per_t.push(serde_json::json!({ "t": t, "bootstrap": boot }));
    }
    match ols_fit(&xs, &ys) {
        Ok(fit) => {
            report.summary.insert("fitted_log_slope".into(), fit.slope);
            report.summary.insert("fitted_log_slope_se".into(), fit.slope_se);
            report.summary.insert("predicted_log_slope".into(), -LOG_CORRECTION);
            report.fits.push(NamedFit {
                name: "median_log_fit".into(),
                design: "median(M_t) - sqrt(2) t ~ a + b log t".into(),
                fit,
            });
        }
        Err(e) => report.notes.push(format!("fit rejected: {e}")),
    }
    report.details = serde_json::json!({ "bootstrap": per_t });
    Ok(report)
}

/// Exceedance frequencies `P(M_t > √2t − (3/(2√2)) log t + y)` and a
/// log-linear fit in `y`.
pub fn run_tail_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut report = ExperimentReport::new(config);
    for &t in &config.t {
        let engine = StreamEngine::new(StreamConfig {
            cap: config.cap,
            max_times: vec![t],
            ..StreamConfig::new(t, config.dt)
        })?;
        let stream = report.stream(format!("tail/t={t}"));
        let (runs, discarded) = run_replicates(&engine, config.seed, &stream, config.reps);
        record_discards(&mut report, discarded, config.reps)?;
        let n = runs.len() as u64;
        let seed = SeedSpec::for_replicate(config.seed, &stream, 0);
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        let mut freqs = Vec::new();
        for &y in &config.y {
            let level = log_centering(t) + y;
            let hits = runs.iter().filter(|o| o.maxima[0] > level).count() as u64;
            let est = proportion(hits, n, seed);
            report.row("exceedance", t, Some(y), est, Some(wilson_interval(hits, n, 1.96)));
            freqs.push(est.mean);
            if hits == 0 {
                report.notes.push(format!("t={t}, y={y}: no exceedances, excluded from the fit"));
            } else {
                xs.push(y);
                ys.push(est.mean.ln());
            }
        }
        let decreasing = freqs.windows(2).all(|w| w[1] < w[0]);
        report.summary.insert(format!("strictly_decreasing/t={t}"), f64::from(u8::from(decreasing)));
        match ols_fit(&xs, &ys) {
            Ok(fit) => {
                report.summary.insert(format!("log_frequency_slope/t={t}"), fit.slope);
                report.fits.push(NamedFit {
                    name: format!("tail_log_fit/t={t}"),
                    design: "log P(M_t > centering + y) ~ a + b y".into(),
                    fit,
                });
            }
            Err(e) => report.notes.push(format!("t={t}: fit rejected: {e}")),
        }
    }
    report.summary.insert("predicted_log_frequency_slope".into(), -SQRT_2);
    Ok(report)
}

/// The count `V(t)` below `β_t s + 1` ending in `[β_t t − 1, β_t t]`.
pub fn persistence_target(t: f64, bridge_correction: bool) -> Result<CountTarget> {
    let line = LinearBarrier::persistence_line(t)?;
    Ok(CountTarget {
        spec: CountSpec {
            barrier: line.into(),
            window: Window::below_line_end(line.slope, t)?,
            bridge_correction,
        },
        t,
    })
}

/// Lattice points `n, n + h, …` up to `2n`.
fn lattice(from: f64, to: f64, h: f64) -> Vec<f64> {
    let k = ((to - from) / h + 1e-9).floor() as usize;
    (0..=k).map(|i| from + i as f64 * h).collect()
}

/// Moves each time to the nearest point of the simulation grid, dropping duplicates.
fn snap_to_grid(times: &[f64], horizon: f64, dt: f64) -> Result<Vec<f64>> {
    let grid = TimeGrid::covering(horizon, dt)?;
    let mut out: Vec<f64> = times
        .iter()
        .map(|t| grid.time(((t / grid.dt).round() as usize).min(grid.n_steps)))
        .collect();
    out.dedup();
    Ok(out)
}

/// `P(V(t) ≠ ∅)`, `t · P(V(t) ≠ ∅)` and lattice estimates of `I_n`.
pub fn run_persistence_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut report = ExperimentReport::new(config);
    let mut pruned = Vec::new();
    for &t in &config.t {
        let engine = StreamEngine::new(StreamConfig {
            cap: config.cap,
            targets: vec![persistence_target(t, config.bridge_correction)?],
            prune_epsilon: config.prune_epsilon,
            ..StreamConfig::new(t, config.dt)
        })?;
        let stream = report.stream(format!("persistence/t={t}"));
        let (runs, discarded) = run_replicates(&engine, config.seed, &stream, config.reps);
        record_discards(&mut report, discarded, config.reps)?;
        let n = runs.len() as u64;
        let hits = runs.iter().filter(|o| o.counts[0] > 0).count() as u64;
        let est = proportion(hits, n, SeedSpec::for_replicate(config.seed, &stream, 0));
        let ci = wilson_interval(hits, n, 1.96);
        report.row("p_nonempty", t, None, est, Some(ci));
        report.row(
            "t_times_p",
            t,
            None,
            MonteCarloEstimate {
                mean: t * est.mean,
                stderr: t * est.stderr,
                ..est
            },
            Some((t * ci.0, t * ci.1)),
        );
        let mass: MeanAccumulator = runs.iter().map(|o| o.pruned_mass[0]).collect();
        pruned.push(serde_json::json!({ "t": t, "mean_pruned_mass": mass.mean() }));
    }
    for &n_val in &config.n_values {
        let times = snap_to_grid(&lattice(n_val, 2.0 * n_val, config.lattice), 2.0 * n_val, config.dt)?;
        if times.len() > 64 {
            return Err(Error::arg("lattice", format!("{} lattice times in [{n_val}, {}]; at most 64", times.len(), 2.0 * n_val)));
        }
        let targets = times
            .iter()
            .map(|&s| persistence_target(s, config.bridge_correction))
            .collect::<Result<Vec<_>>>()?;
        let engine = StreamEngine::new(StreamConfig {
            cap: config.cap,
            targets,
            prune_epsilon: config.prune_epsilon,
            ..StreamConfig::new(2.0 * n_val, config.dt)
        })?;
        let stream = report.stream(format!("persistence/I_n/n={n_val}"));
        let (runs, discarded) = run_replicates(&engine, config.seed, &stream, config.reps);
        record_discards(&mut report, discarded, config.reps)?;
        let values: MeanAccumulator = runs
            .iter()
            .map(|o| {
                let hit = o.counts.iter().filter(|&&c| c > 0).count() as f64;
                n_val * hit / times.len() as f64
            })
            .collect();
        report.row(
            "I_n",
            n_val,
            None,
            values.estimate(SeedSpec::for_replicate(config.seed, &stream, 0)),
            None,
        );
    }
    if let Some(ratio) = spread(report.rows_named("t_times_p").map(|r| r.estimate)) {
        report.summary.insert("t_times_p_max_over_min".into(), ratio);
    }
    report.details = serde_json::json!({ "pruning": pruned });
    Ok(report)
}

/// `max / min` of positive values, `None` if any is not positive.
pub fn spread(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() || v.iter().any(|x| !(*x > 0.0)) {
        return None;
    }
    let max = v.iter().copied().fold(f64::MIN, f64::max);
    let min = v.iter().copied().fold(f64::MAX, f64::min);
    Some(max / min)
}

/// One replicate's path of `r(t) = (M_t − √2 t)/log t` on the lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationTrace {
    pub replicate: u64,
    pub min_r: f64,
    pub max_r: f64,
    pub r: Vec<f64>,
}

pub fn run_fluctuation_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut report = ExperimentReport::new(config);
    let horizon = config.t[config.t.len() - 1];
    let times = snap_to_grid(&lattice(config.window_start, horizon, config.lattice), horizon, config.dt)?;
    let engine = StreamEngine::new(StreamConfig {
        cap: config.cap,
        max_times: times.clone(),
        ..StreamConfig::new(horizon, config.dt)
    })?;
    let stream = report.stream(format!("fluctuation/horizon={horizon}"));
    let all: Vec<(u64, StreamOutcome)> = (0..config.reps)
        .into_par_iter()
        .map(|k| (k, engine.run(SeedSpec::for_replicate(config.seed, &stream, k))))
        .collect();
    let discarded = all.iter().filter(|(_, o)| o.truncated).count() as u64;
    record_discards(&mut report, discarded, config.reps)?;
    let traces: Vec<FluctuationTrace> = all
        .into_iter()
        .filter(|(_, o)| !o.truncated)
        .map(|(k, o)| {
            let r: Vec<f64> = times
                .iter()
                .zip(&o.maxima)
                .map(|(t, m)| (m - SQRT_2 * t) / t.ln())
                .collect();
            FluctuationTrace {
                replicate: k,
                min_r: r.iter().copied().fold(f64::INFINITY, f64::min),
                max_r: r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                r,
            }
        })
        .collect();
    let seed = SeedSpec::for_replicate(config.seed, &stream, 0);
    for (i, &t) in times.iter().enumerate() {
        let acc: MeanAccumulator = traces.iter().map(|tr| tr.r[i]).collect();
        report.row("mean_r", t, None, acc.estimate(seed), None);
    }
    let mins: Vec<f64> = traces.iter().map(|t| t.min_r).collect();
    let maxs: Vec<f64> = traces.iter().map(|t| t.max_r).collect();
    let oscillating = traces.iter().filter(|t| t.max_r - t.min_r > 0.2).count();
    let n = traces.len() as u64;
    let med_min = upper_median(&mins).unwrap_or(f64::NAN);
    let med_max = upper_median(&maxs).unwrap_or(f64::NAN);
    report.row("oscillating_replicates", horizon, None, proportion(oscillating as u64, n, seed), None);
    report.summary.insert("oscillating_count".into(), oscillating as f64);
    report.summary.insert("median_min_r".into(), med_min);
    report.summary.insert("median_max_r".into(), med_max);
    report.summary.insert("liminf_constant".into(), -LOG_CORRECTION);
    report.summary.insert("limsup_constant".into(), -1.0 / (2.0 * SQRT_2));
    report.details = serde_json::json!({ "times": times, "replicates": traces });
    Ok(report)
}

/// Sweeps of the two Bessel functionals against their bound shapes.
///
/// For the second functional the CSV `y` column holds `s`.
pub fn run_lemma_sweeps(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut report = ExperimentReport::new(config);
    for &t in &config.t {
        let stream = report.stream(format!("lemmas/lemma22/t={t}"));
        let est = lemma22_functional_estimate(t, 0.0, config.samples, SeedSpec::for_replicate(config.seed, &stream, 0))?;
        report.row("lemma22", t, Some(0.0), est, None);
        let scale = t.powi(3);
        report.row(
            "lemma22_t3",
            t,
            Some(0.0),
            MonteCarloEstimate {
                mean: est.mean * scale,
                stderr: est.stderr * scale,
                ..est
            },
            None,
        );
    }
    if let Some(r) = spread(report.rows_named("lemma22_t3").map(|r| r.estimate)) {
        report.summary.insert("lemma22_t3_max_over_min".into(), r);
    }
    let mut shapes = Vec::new();
    for &t in &config.t {
        for s in [t, t / 2.0] {
            let Ok(params) = Lemma23Params::new(s, t) else { continue };
            let stream = report.stream(format!("lemmas/lemma23/s={s}/t={t}"));
            let est = lemma23_functional_estimate(params, config.samples, SeedSpec::for_replicate(config.seed, &stream, 0))?;
            let (near, far) = params.bound_terms();
            let shape = near + far;
            report.row("lemma23", t, Some(s), est, None);
            report.row(
                "lemma23_over_bound",
                t,
                Some(s),
                MonteCarloEstimate {
                    mean: est.mean / shape,
                    stderr: est.stderr / shape,
                    ..est
                },
                None,
            );
            shapes.push(serde_json::json!({ "s": s, "t": t, "a_st": params.a_st, "term_t52": near, "term_t32": far }));
        }
    }
    for (label, pick) in [("equal", true), ("double", false)] {
        let vals = report
            .rows_named("lemma23_over_bound")
            .filter(|r| (r.y == Some(r.t)) == pick)
            .map(|r| r.estimate);
        if let Some(r) = spread(vals) {
            report.summary.insert(format!("lemma23_over_bound_max_over_min/{label}"), r);
        }
    }
    report.details = serde_json::json!({ "lemma23_bound_terms": shapes });
    Ok(report)
}

/// Moments of `H(y, t)` from direct simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HCountSummary {
    pub mean: MonteCarloEstimate,
    pub second_moment: MonteCarloEstimate,
    pub nonzero: MonteCarloEstimate,
    /// Average expected count dropped by pruning per tree.
    pub mean_pruned_mass: f64,
    pub discarded: u64,
}

/// Simulates `reps` trees and counts particles below `β(t,y) s + 1` that end
/// in `[β t − 1, β t]`.
pub fn simulate_h_counts(
    y: f64,
    t: f64,
    reps: u64,
    dt: f64,
    prune_epsilon: Option<f64>,
    bridge_correction: bool,
    master_seed: u64,
) -> Result<HCountSummary> {
    let line = LinearBarrier::lower_bound_line(t, y)?;
    let target = CountTarget {
        spec: CountSpec {
            barrier: line.into(),
            window: Window::below_line_end(line.slope, t)?,
            bridge_correction,
        },
        t,
    };
    let engine = StreamEngine::new(StreamConfig {
        targets: vec![target],
        prune_epsilon,
        ..StreamConfig::new(t, dt)
    })?;
    let stream = format!("h_counts:t={t}:y={y}");
    let (runs, discarded) = run_replicates(&engine, master_seed, &stream, reps);
    if discarded as f64 > MAX_DISCARD_RATE * reps as f64 {
        return Err(Error::Experiment(format!("{discarded} of {reps} trees hit the particle cap")));
    }
    let seed = SeedSpec::for_replicate(master_seed, &stream, 0);
    let first: MeanAccumulator = runs.iter().map(|o| o.counts[0] as f64).collect();
    let second: MeanAccumulator = runs.iter().map(|o| (o.counts[0] as f64).powi(2)).collect();
    let hits = runs.iter().filter(|o| o.counts[0] > 0).count() as u64;
    let pruned: MeanAccumulator = runs.iter().map(|o| o.pruned_mass[0]).collect();
    Ok(HCountSummary {
        mean: first.estimate(seed),
        second_moment: second.estimate(seed),
        nonzero: proportion(hits, runs.len() as u64, seed),
        mean_pruned_mass: pruned.mean(),
        discarded,
    })
}

/// Fast internal consistency checks; fails if any check fails.
pub fn run_selftest(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut report = ExperimentReport::new(config);
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let mut sandwich = true;
    for t in [0.5, 1.0, 4.0] {
        for x in [0.1, 1.0, 3.0] {
            for z in [0.05, 1.0, 5.0] {
                let d = bessel_density(t, x, z)?;
                let (lo, hi) = bessel_density_bounds(t, x, z)?;
                sandwich &= lo <= d * (1.0 + 1e-12) && d <= hi * (1.0 + 1e-12);
            }
        }
    }
    checks.push(("density_sandwich", sandwich));

    let total = window_probability(1.0, 1.0, 0.0, 50.0);
    checks.push(("density_normalized", (total - 1.0).abs() < 1e-9));

    let engine = StreamEngine::new(StreamConfig {
        cap: config.cap,
        max_times: vec![1.0],
        ..StreamConfig::new(1.0, config.dt)
    })?;
    let stream = report.stream("selftest/population".into());
    let reps = config.reps.max(4000);
    let pop: MeanAccumulator = (0..reps)
        .into_par_iter()
        .map(|k| engine.run(SeedSpec::for_replicate(config.seed, &stream, k)))
        .map(|o| o.particles.div_ceil(2) as f64)
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    let est = pop.estimate(SeedSpec::for_replicate(config.seed, &stream, 0));
    report.row("mean_population_t1", 1.0, None, est, Some(est.ci(1.96)));
    checks.push(("population_mean_e", est.z_to(std::f64::consts::E).abs() < 4.0));

    let exact = StreamEngine::new(StreamConfig {
        cap: config.cap,
        max_times: vec![2.0, 3.0],
        exact_grid: true,
        ..StreamConfig::new(3.0, config.dt)
    })?;
    let mut agree = true;
    for k in 0..10 {
        let seed = SeedSpec::for_replicate(config.seed, "selftest/engines", k);
        let tree = simulate_bbm(3.0, config.dt, seed, config.cap)?;
        let streamed = exact.run(seed);
        agree &= streamed.maxima == [max_at(&tree, 2.0)?, max_at(&tree, 3.0)?];
    }
    checks.push(("tree_and_stream_agree", agree));

    let xs = [1.0, 2.0, 3.0, 4.0];
    let ys: Vec<f64> = xs.iter().map(|x| 0.5 - 2.0 * x).collect();
    let fit = ols_fit(&xs, &ys)?;
    checks.push(("ols_exact_line", (fit.slope + 2.0).abs() < 1e-12 && (fit.intercept - 0.5).abs() < 1e-12));

    let mut failed = Vec::new();
    for (name, ok) in checks {
        report.summary.insert(format!("check/{name}"), f64::from(u8::from(ok)));
        if !ok {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        return Err(Error::Experiment(format!("self-test failed: {}", failed.join(", "))));
    }
    Ok(report)
}

/// Runs `config.experiment` on a pool of `config.jobs` workers and stamps
/// the wall-clock time.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Experiment(format!("worker pool: {e}")))?;
    let start = Instant::now();
    let mut report = pool.install(|| match config.experiment {
        Experiment::Median => run_median_experiment(config),
        Experiment::Tail => run_tail_experiment(config),
        Experiment::Persistence => run_persistence_experiment(config),
        Experiment::Fluctuation => run_fluctuation_experiment(config),
        Experiment::Lemmas => run_lemma_sweeps(config),
        Experiment::Selftest => run_selftest(config),
    })?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(e: Experiment) -> ExperimentConfig {
        let mut c = ExperimentConfig::defaults(e);
        c.reps = 200;
        c.samples = 20_000;
        c.bootstrap_resamples = 100;
        c
    }

    #[test]
    fn defaults_validate() {
        for e in [
            Experiment::Median,
            Experiment::Tail,
            Experiment::Persistence,
            Experiment::Fluctuation,
            Experiment::Lemmas,
            Experiment::Selftest,
        ] {
            ExperimentConfig::defaults(e).validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ExperimentConfig::defaults(Experiment::Median);
        c.t.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::defaults(Experiment::Median);
        c.reps = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::defaults(Experiment::Median);
        c.dt = 0.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::defaults(Experiment::Tail);
        c.y = vec![4.0];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::defaults(Experiment::Fluctuation);
        c.t = vec![5.0];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::defaults(Experiment::Lemmas);
        c.t = vec![50.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_overlay() {
        let c = ExperimentConfig::from_json_overlay(Experiment::Tail, r#"{"reps": 7, "y": [0.5]}"#).unwrap();
        assert_eq!(c.reps, 7);
        assert_eq!(c.y, vec![0.5]);
        assert_eq!(c.t, vec![10.0]);
        assert!(ExperimentConfig::from_json_overlay(Experiment::Tail, r#"{"bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json_overlay(Experiment::Tail, r#"{"experiment": "median"}"#).is_err());
        assert!(ExperimentConfig::from_json_overlay(Experiment::Tail, "[1]").is_err());
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn median_report_is_reproducible() {
        let mut c = small(Experiment::Median);
        c.t = vec![2.0, 3.0, 4.0];
        let mut a = run_experiment(&c).unwrap();
        let mut b = run_experiment(&c).unwrap();
        assert!(a.wall_clock_seconds > 0.0);
        a.wall_clock_seconds = 0.0;
        b.wall_clock_seconds = 0.0;
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.fit("median_log_fit").is_some());
        assert_eq!(a.rows_named("median").count(), 3);
        // thread count does not change results
        c.jobs = Some(1);
        let mut d = run_experiment(&c).unwrap();
        d.wall_clock_seconds = 0.0;
        d.config.jobs = None;
        assert_eq!(a.to_json(), d.to_json());
    }

    #[test]
    fn single_point_median_fit_rejected() {
        let mut c = small(Experiment::Median);
        c.t = vec![3.0];
        let r = run_median_experiment(&c).unwrap();
        assert!(r.fits.is_empty());
        assert!(r.notes.iter().any(|n| n.contains("fit rejected")));
    }

    #[test]
    fn cap_overflow_aborts() {
        let mut c = small(Experiment::Median);
        c.t = vec![3.0, 4.0, 5.0];
        c.cap = 20;
        assert!(matches!(run_median_experiment(&c), Err(Error::Experiment(_))));
    }

    #[test]
    fn tail_report_shape() {
        let mut c = small(Experiment::Tail);
        c.t = vec![5.0];
        c.y = vec![0.0, 1.0, 2.0];
        let r = run_tail_experiment(&c).unwrap();
        let f: Vec<f64> = r.rows_named("exceedance").map(|r| r.estimate).collect();
        assert_eq!(f.len(), 3);
        assert!(f[0] > 0.0 && f[0] < 1.0);
        assert!(f.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn persistence_lattice_estimate_in_range() {
        let mut c = small(Experiment::Persistence);
        c.t = vec![3.0];
        c.n_values = vec![2.0];
        let r = run_persistence_experiment(&c).unwrap();
        let i_n = r.rows_named("I_n").next().unwrap();
        assert!((0.0..=2.0).contains(&i_n.estimate));
        let p = r.rows_named("p_nonempty").next().unwrap();
        assert!((0.0..=1.0).contains(&p.estimate));
    }

    #[test]
    fn fluctuation_values_are_finite() {
        let mut c = small(Experiment::Fluctuation);
        c.reps = 5;
        c.t = vec![8.0];
        let r = run_fluctuation_experiment(&c).unwrap();
        let traces = r.details["replicates"].as_array().unwrap();
        assert_eq!(traces.len(), 5);
        for row in r.rows_named("mean_r") {
            assert!(row.estimate.is_finite());
        }
    }

    #[test]
    fn lemma_sweeps_nonnegative_and_scale_with_n() {
        let mut c = small(Experiment::Lemmas);
        c.t = vec![5.0, 10.0];
        let r = run_lemma_sweeps(&c).unwrap();
        assert!(r.rows.iter().all(|row| row.estimate >= 0.0));
        assert!(r.rows_named("lemma23").count() >= 3);
        c.samples *= 2;
        let r2 = run_lemma_sweeps(&c).unwrap();
        for (a, b) in r.rows_named("lemma22").zip(r2.rows_named("lemma22")) {
            let ratio = a.stderr / b.stderr;
            assert!((ratio / SQRT_2 - 1.0).abs() < 0.3, "stderr ratio {ratio}");
        }
    }

    #[test]
    fn floats_use_seventeen_digits() {
        let mut c = small(Experiment::Lemmas);
        c.t = vec![5.0];
        c.samples = 1000;
        let r = run_lemma_sweeps(&c).unwrap();
        let json = r.to_json();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["config"]["dt"].as_f64(), Some(0.02));
        assert!(json.contains("2.0000000000000000e-2"));
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("experiment,t,y,estimate,stderr,n"));
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "lemmas/lemma22");
        assert_eq!(first[1], "5.0000000000000000e0");
        assert_eq!(first.len(), 6);
    }

    #[test]
    fn selftest_passes() {
        let r = run_experiment(&ExperimentConfig::defaults(Experiment::Selftest)).unwrap();
        assert!(r.summary.values().all(|v| *v == 1.0), "{:?}", r.summary);
    }

    #[test]
    fn report_files_written() {
        let dir = std::env::temp_dir().join(format!("bbm-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut c = small(Experiment::Lemmas);
        c.t = vec![5.0];
        c.samples = 1000;
        let r = run_lemma_sweeps(&c).unwrap();
        let (json, csv) = r.write(&dir.join("report.json")).unwrap();
        assert!(json.ends_with("report.json") && csv.ends_with("report.csv"));
        let back: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
        assert_eq!(back.rows, r.rows);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
