use bbm_spine::experiments::simulate_h_counts;
use bbm_spine::stochastic::{bridge_exceeds_prob, normal, SeedSpec};
use proptest::prelude::*;

proptest! {
    #[test]
    fn bridge_exceedance_decreases_in_level(a in -3.0f64..1.0, b in -3.0f64..1.0, h in 0.01f64..5.0, c in 1.0f64..4.0, dc in 1e-3f64..2.0) {
        let p = bridge_exceeds_prob(a, b, h, c).unwrap();
        let q = bridge_exceeds_prob(a, b, h, c + dc).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(q <= p);
    }

    #[test]
    fn bridge_exceedance_symmetric(a in -3.0f64..1.0, b in -3.0f64..1.0, h in 0.01f64..5.0, c in 1.0f64..4.0) {
        let p = bridge_exceeds_prob(a, b, h, c).unwrap();
        let q = bridge_exceeds_prob(b, a, h, c).unwrap();
        prop_assert!((p - q).abs() <= 1e-15);
    }
}

#[test]
fn subdivided_bridges_cross_at_the_predicted_rate() {
    // discrete maxima are shifted by the Broadie-Glasserman-Kou constant
    const SHIFT: f64 = 0.5826;
    let steps = 4000;
    let n = 20_000;
    let dt = 1.0 / steps as f64;
    let shift = SHIFT * dt.sqrt();
    let mut maxima = Vec::with_capacity(n);
    for k in 0..n {
        let mut rng = SeedSpec::for_replicate(5, "bridge", k as u64).rng();
        let mut w = vec![0.0; steps + 1];
        for i in 1..=steps {
            w[i] = w[i - 1] + dt.sqrt() * normal(&mut rng);
        }
        let end = w[steps];
        let max = (0..=steps)
            .map(|i| w[i] - i as f64 * dt * end)
            .fold(f64::NEG_INFINITY, f64::max);
        maxima.push(max);
    }
    for c in [0.5, 1.0, 2.0] {
        let p = bridge_exceeds_prob(0.0, 0.0, 1.0, c).unwrap();
        let freq = maxima.iter().filter(|&&m| m > c - shift).count() as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt().max(1.0 / n as f64);
        assert!((freq - p).abs() < 4.0 * se + 1e-3, "c = {c}: {freq} vs {p}");
    }
}

#[test]
fn h_estimate_stable_under_step_halving() {
    let coarse = simulate_h_counts(0.0, 6.0, 8000, 0.04, Some(1e-6), true, 41).unwrap();
    let fine = simulate_h_counts(0.0, 6.0, 8000, 0.02, Some(1e-6), true, 42).unwrap();
    let z = coarse.mean.z_distance(&fine.mean);
    assert!(z.abs() < 3.0, "{:?} vs {:?}", coarse.mean, fine.mean);
}

#[test]
fn paley_zygmund_ratios_comparable_across_offsets() {
    use bbm_spine::spine::paley_zygmund_lower_bound;
    let mut ratios = Vec::new();
    for t in [10.0, 20.0] {
        for y in [0.0, 1.0, 2.0] {
            let pz = paley_zygmund_lower_bound(y, t, 200_000, SeedSpec::for_replicate(9, "pz", (t * 10.0 + y) as u64)).unwrap();
            assert!(pz.bound > 0.0 && pz.bound <= 1.0);
            ratios.push(pz.bound);
        }
    }
    let max = ratios.iter().copied().fold(f64::MIN, f64::max);
    let min = ratios.iter().copied().fold(f64::MAX, f64::min);
    assert!(max / min <= 10.0, "{ratios:?}");
}
