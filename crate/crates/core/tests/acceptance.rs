//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any fails.

use std::f64::consts::SQRT_2;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use bbm_spine::barriers::{beta, LinearBarrier};
use bbm_spine::bessel::{bessel_density, bessel_density_bounds, sample_bessel, window_probability, BesselParams};
use bbm_spine::experiments::{
    run_fluctuation_experiment, run_lemma_sweeps, run_median_experiment, run_persistence_experiment,
    run_tail_experiment, simulate_h_counts, HCountSummary, Experiment, ExperimentConfig,
};
use bbm_spine::quadrature::integrate;
use bbm_spine::spine::{expected_h_quadrature, many_to_one_estimate, paley_zygmund_lower_bound, second_moment_h_estimate};
use bbm_spine::stats::MonteCarloEstimate;
use bbm_spine::stochastic::{uniform, GridPath, SeedSpec, TimeGrid};
use bbm_spine::Result;

const SEED: u64 = 20_240_601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn fmt(e: &MonteCarloEstimate) -> String {
    format!("{:.4}±{:.4}", e.mean, e.stderr)
}

fn c1_sandwich() -> Result<Outcome> {
    let mut rng = SeedSpec::for_replicate(SEED, "c1", 0).rng();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let t = 0.1 + 49.9 * uniform(&mut rng);
        let x = 6.0 * uniform(&mut rng);
        let z = 6.0 * uniform(&mut rng);
        let d = bessel_density(t, x, z)?;
        let (lo, hi) = bessel_density_bounds(t, x, z)?;
        worst = worst.max(lo - d).max(d - hi);
    }
    outcome(worst <= 1e-12, format!("largest violation {worst:.3e} over 1000 points"))
}

fn c2_normalization() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for t in [0.1f64, 1.0, 10.0] {
        for x in [0.0, 1.0, 5.0] {
            let upper = x + 40.0 * t.sqrt();
            let mass = integrate(|z| bessel_density(t, x, z).unwrap(), 0.0, upper, 1e-12, 1e-12)?;
            worst = worst.max((mass - 1.0).abs());
        }
    }
    outcome(worst < 1e-8, format!("max |mass - 1| = {worst:.3e} over 9 (t, x) pairs"))
}

fn c3_sampler_law() -> Result<Outcome> {
    let grid = TimeGrid::covering(1.0, 0.1)?;
    let params = BesselParams::new(1.0)?;
    let n = 200_000u64;
    let mut ends = (0..n)
        .map(|k| sample_bessel(params, &grid, SeedSpec::for_replicate(SEED, "c3", k)).map(|p| p.last()))
        .collect::<Result<Vec<f64>>>()?;
    ends.sort_by(f64::total_cmp);
    let nf = n as f64;
    let d = ends
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let f = window_probability(1.0, 1.0, 0.0, z);
            (f - i as f64 / nf).abs().max((f - (i + 1) as f64 / nf).abs())
        })
        .fold(0.0, f64::max);
    outcome(d < 0.01, format!("sup distance {d:.5} with n = {n}"))
}

fn h_window_indicator(b: f64, t: f64) -> impl Fn(&GridPath) -> f64 + Sync {
    move |xi: &GridPath| f64::from(u8::from((b * t - 1.0..=b * t).contains(&xi.last())))
}

/// Direct simulation at `t = 8`, `y = 0`, shared by the first- and second-moment checks.
fn direct_t8() -> Result<HCountSummary> {
    static CELL: OnceLock<HCountSummary> = OnceLock::new();
    if let Some(h) = CELL.get() {
        return Ok(*h);
    }
    let h = simulate_h_counts(0.0, 8.0, 10_000, 0.02, Some(1e-6), true, SEED)?;
    Ok(*CELL.get_or_init(|| h))
}

fn c4_many_to_one() -> Result<Outcome> {
    let (t, y) = (8.0, 0.0);
    let b = beta(t, y)?;
    let f = LinearBarrier::new(b, 0.0)?;
    let grid = TimeGrid::covering(t, 0.005)?;
    let spine = many_to_one_estimate(h_window_indicator(b, t), 1.0, &f, &grid, 100_000, SeedSpec::for_replicate(SEED, "c4/spine", 0))?;
    let quad = expected_h_quadrature(y, t)?;
    let direct = direct_t8()?;
    let z = [spine.z_to(quad), direct.mean.z_to(quad), spine.z_distance(&direct.mean)];
    let pass = z.iter().all(|z| z.abs() < 3.0);
    outcome(
        pass,
        format!(
            "quadrature {quad:.4}, spine {}, direct {} (pruned mass {:.1e}); z = {:.2}, {:.2}, {:.2}",
            fmt(&spine),
            fmt(&direct.mean),
            direct.mean_pruned_mass,
            z[0],
            z[1],
            z[2]
        ),
    )
}

fn c5_many_to_two() -> Result<Outcome> {
    let (t, y) = (8.0, 0.0);
    let spine = second_moment_h_estimate(y, t, 1_000_000, SeedSpec::for_replicate(SEED, "c5/spine", 0))?;
    let direct = direct_t8()?;
    let z = spine.z_distance(&direct.second_moment);
    outcome(
        z.abs() < 3.0,
        format!("spine E[H^2] {}, direct {}, z = {z:.2}", fmt(&spine), fmt(&direct.second_moment)),
    )
}

fn c6_first_moment_shape() -> Result<Outcome> {
    let t = 50.0;
    let r = (0..=7)
        .map(|y| expected_h_quadrature(f64::from(y), t).map(|h| h * (SQRT_2 * f64::from(y)).exp()))
        .collect::<Result<Vec<f64>>>()?;
    let max = r.iter().copied().fold(f64::MIN, f64::max);
    let min = r.iter().copied().fold(f64::MAX, f64::min);
    outcome(max / min <= 3.0, format!("max/min of E[H] e^(sqrt2 y) over y = 0..7 is {:.3}", max / min))
}

fn c7_paley_zygmund() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    let mut scaled = Vec::new();
    for (t, reps) in [(10.0, 4000), (20.0, 2000)] {
        for y in [0.0, 1.0, 2.0] {
            let pz = paley_zygmund_lower_bound(y, t, 1_000_000, SeedSpec::for_replicate(SEED, &format!("c7/pz/t={t}/y={y}"), 0))?;
            let direct = simulate_h_counts(y, t, reps, 0.02, Some(1e-5), true, SEED)?;
            let room = direct.nonzero.mean + 3.0 * direct.nonzero.stderr;
            pass &= pz.bound > 0.0 && pz.bound <= room;
            scaled.push(pz.bound * (SQRT_2 * y).exp());
            parts.push(format!("({t},{y}): {:.4} vs P(H>0) {}", pz.bound, fmt(&direct.nonzero)));
        }
    }
    let max = scaled.iter().copied().fold(f64::MIN, f64::max);
    let min = scaled.iter().copied().fold(f64::MAX, f64::min);
    pass &= max / min <= 10.0;
    outcome(pass, format!("{}; scaled spread {:.2}", parts.join("; "), max / min))
}

fn c8_median_slope() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::defaults(Experiment::Median);
    cfg.seed = SEED;
    let report = run_median_experiment(&cfg)?;
    let Some(fit) = report.fit("median_log_fit") else {
        return outcome(false, "no fit".into());
    };
    outcome(
        (-1.8..=-0.4).contains(&fit.slope),
        format!("fitted slope {:.4}±{:.4} over t = 4..10, 2000 reps", fit.slope, fit.slope_se),
    )
}

fn c9_tail_shape() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::defaults(Experiment::Tail);
    cfg.seed = SEED;
    let report = run_tail_experiment(&cfg)?;
    let freqs: Vec<f64> = report.rows_named("exceedance").map(|r| r.estimate).collect();
    let decreasing = freqs.windows(2).all(|w| w[1] < w[0]);
    let Some(fit) = report.fit("tail_log_fit/t=10") else {
        return outcome(false, "no fit".into());
    };
    let pass = decreasing && (-2.0..=-0.9).contains(&fit.slope) && freqs[0] > 0.0 && freqs[0] < 1.0;
    outcome(pass, format!("frequencies {freqs:.4?}, log slope {:.4}±{:.4}", fit.slope, fit.slope_se))
}

fn c10_lemma22() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::defaults(Experiment::Lemmas);
    cfg.seed = SEED;
    let report = run_lemma_sweeps(&cfg)?;
    let scaled: Vec<f64> = report.rows_named("lemma22_t3").map(|r| r.estimate).collect();
    let spread = report.summary.get("lemma22_t3_max_over_min").copied().unwrap_or(f64::INFINITY);
    outcome(spread <= 20.0, format!("t^3 * estimate {scaled:.3?}, spread {spread:.3}"))
}

fn c11_persistence() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::defaults(Experiment::Persistence);
    cfg.seed = SEED;
    let report = run_persistence_experiment(&cfg)?;
    let rows: Vec<_> = report.rows_named("t_times_p").collect();
    let positive = rows.iter().all(|r| r.estimate > 0.0 && r.ci.is_some_and(|(lo, _)| lo > 0.0));
    let spread = report.summary.get("t_times_p_max_over_min").copied().unwrap_or(f64::INFINITY);
    let shown: Vec<String> = rows.iter().map(|r| format!("t={}: {:.4}±{:.4}", r.t, r.estimate, r.stderr)).collect();
    outcome(positive && spread <= 10.0, format!("{}; spread {spread:.2}", shown.join(", ")))
}

fn c12_fluctuation() -> Result<Outcome> {
    let mut cfg = ExperimentConfig::defaults(Experiment::Fluctuation);
    cfg.seed = SEED;
    let report = run_fluctuation_experiment(&cfg)?;
    let osc = report.summary["oscillating_count"];
    let lo = report.summary["median_min_r"];
    let hi = report.summary["median_max_r"];
    let window = -2.5..=0.5;
    let pass = osc >= 45.0 && window.contains(&lo) && window.contains(&hi);
    outcome(pass, format!("{osc} of 50 oscillate; median min r {lo:.3}, median max r {hi:.3}"))
}

type Check = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    let criteria: [(u32, Check); 12] = [
        (1, c1_sandwich),
        (2, c2_normalization),
        (3, c3_sampler_law),
        (4, c4_many_to_one),
        (5, c5_many_to_two),
        (6, c6_first_moment_shape),
        (7, c7_paley_zygmund),
        (8, c8_median_slope),
        (9, c9_tail_shape),
        (10, c10_lemma22),
        (11, c11_persistence),
        (12, c12_fluctuation),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(o) => {
                failed += usize::from(!o.pass);
                println!("criterion {n}: {} ({}) [{secs:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            }
            Err(e) => {
                failed += 1;
                println!("criterion {n}: FAIL (error: {e}) [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
