use bbm_spine::bessel::{sample_bessel, sample_coupled_pair, window_probability, BesselParams};
use bbm_spine::stats::MeanAccumulator;
use bbm_spine::stochastic::{SeedSpec, TimeGrid};
use std::f64::consts::PI;

/// Kolmogorov distance between the sample and the exact endpoint law from `x0`.
fn endpoint_sup_distance(x0: f64, t: f64, n: u64, dt: f64) -> f64 {
    let grid = TimeGrid::covering(t, dt).unwrap();
    let params = BesselParams::new(x0).unwrap();
    let mut ends: Vec<f64> = (0..n)
        .map(|k| sample_bessel(params, &grid, SeedSpec::for_replicate(17, "endpoint", k)).unwrap().last())
        .collect();
    ends.sort_by(f64::total_cmp);
    let n = ends.len() as f64;
    ends.iter()
        .enumerate()
        .map(|(i, &z)| {
            let f = window_probability(x0, t, 0.0, z);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn endpoint_law_matches_density_cdf() {
    let d = endpoint_sup_distance(1.0, 1.0, 200_000, 0.25);
    assert!(d < 0.01, "sup distance {d}");
}

#[test]
fn endpoint_law_from_small_start() {
    let d = endpoint_sup_distance(0.05, 2.0, 50_000, 0.5);
    assert!(d < 0.02, "sup distance {d}");
}

/// Mean of a 3-d Gaussian norm with centre at distance `x` and variance `u`.
fn bessel_mean(x: f64, u: f64) -> f64 {
    let mu = x / u.sqrt();
    if mu < 1e-6 {
        return 2.0 * (2.0 * u / PI).sqrt();
    }
    u.sqrt() * ((2.0 / PI).sqrt() * (-mu * mu / 2.0).exp() + (mu + 1.0 / mu) * libm::erf(mu / 2f64.sqrt()))
}

#[test]
fn branches_independent_after_split() {
    let grid = TimeGrid::covering(3.0, 0.05).unwrap();
    let t = grid.t_end;
    let mut cross = MeanAccumulator::new();
    let mut resid = MeanAccumulator::new();
    for k in 0..100_000 {
        let s = sample_coupled_pair(&grid, SeedSpec::for_replicate(3, "coupled", k)).unwrap();
        let Some(j) = s.split_index.filter(|&j| j < grid.n_steps) else { continue };
        let x = s.y1.values[j];
        assert_eq!(x, s.y2.values[j]);
        let m = bessel_mean(x, t - grid.time(j));
        let (r1, r2) = (s.y1.last() - m, s.y2.last() - m);
        cross.push(r1 * r2);
        resid.push(r1);
    }
    let z = cross.mean() / (cross.variance() / cross.count() as f64).sqrt();
    assert!(z.abs() < 4.0, "residual product mean {} (z = {z})", cross.mean());
    let z1 = resid.mean() / (resid.variance() / resid.count() as f64).sqrt();
    assert!(z1.abs() < 4.0, "residual mean {} (z = {z1})", resid.mean());
}

#[test]
fn shared_prefix_correlates_paths() {
    let grid = TimeGrid::covering(3.0, 0.05).unwrap();
    let mut prod = MeanAccumulator::new();
    let mut a = MeanAccumulator::new();
    let mut b = MeanAccumulator::new();
    for k in 0..20_000 {
        let s = sample_coupled_pair(&grid, SeedSpec::for_replicate(4, "coupled", k)).unwrap();
        prod.push(s.y1.last() * s.y2.last());
        a.push(s.y1.last());
        b.push(s.y2.last());
    }
    let cov = prod.mean() - a.mean() * b.mean();
    assert!(cov > 0.1, "covariance {cov}");
}
