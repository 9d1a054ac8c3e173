use gridflex::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// ∫ (F(x) - 1{x ≥ y})² dx for the empirical step CDF, integrated with a
/// midpoint rule on a grid refined between every breakpoint. The integrand
/// is constant between breakpoints, so this is exact up to rounding.
fn crps_by_integration(ens: &[f64], y: f64) -> f64 {
    let mut pts: Vec<f64> = ens.to_vec();
    pts.push(y);
    pts.sort_by(f64::total_cmp);
    let n = ens.len() as f64;
    let cdf = |x: f64| ens.iter().filter(|&&e| e <= x).count() as f64 / n;
    let mut total = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        const SUB: usize = 8;
        let h = (b - a) / SUB as f64;
        for s in 0..SUB {
            let x = a + (s as f64 + 0.5) * h;
            let step = if x >= y { 1.0 } else { 0.0 };
            total += (cdf(x) - step).powi(2) * h;
        }
    }
    total
}

#[test]
fn crps_two_point_matches_integration() {
    let v = crps(&[0.0, 2.0], 1.0).unwrap();
    assert!((v - crps_by_integration(&[0.0, 2.0], 1.0)).abs() <= 1e-6);
}

#[test]
fn crps_random_ensembles_match_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let n = rng.random_range(1..60);
        let ens: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y = rng.random_range(-6.0..6.0);
        let a = crps(&ens, y).unwrap();
        let b = crps_by_integration(&ens, y);
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn crps_empty_is_error() {
    assert_eq!(crps(&[], 1.0), Err(MetricError::EmptyEnsemble));
}

/// Direct transcription of the piecewise pinball definition.
fn pinball_oracle(yq: f64, y: f64, q: f64) -> f64 {
    if y < yq {
        (1.0 - q) * (yq - y)
    } else {
        q * (y - yq)
    }
}

#[test]
fn pinball_matches_plug_in_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let yq = rng.random_range(-10.0..10.0);
        let y = rng.random_range(-10.0..10.0);
        let q = rng.random_range(0.001..0.999);
        assert_eq!(pinball(yq, y, q).unwrap(), pinball_oracle(yq, y, q));
    }
    assert!(pinball(0.0, 0.0, 0.0).is_err());
}

#[test]
fn gaussian_fit_identical_and_large_sample() {
    let g = fit_gaussian(&vec![vec![0.3, -0.2]; 5], &[1.0, 2.0]).unwrap();
    assert_eq!(g.sigma, vec![0.0, 0.0]);
    assert!((g.mu[0] - 1.3).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dist = Normal::new(0.0, 0.5).unwrap();
    let scen: Vec<Vec<f64>> = (0..10_000).map(|_| vec![dist.sample(&mut rng)]).collect();
    let g = fit_gaussian(&scen, &[0.0]).unwrap();
    assert!((g.sigma[0] / 0.5 - 1.0).abs() <= 0.02, "{}", g.sigma[0]);
}

#[test]
fn score_day_uses_quantiles_and_crps() {
    let ens: Vec<Vec<f64>> = (0..11).map(|k| vec![k as f64, 0.0]).collect();
    let s = score_day(&ens, &[5.0, 0.0]).unwrap();
    // quantiles of 0..=10 at 0.1 / 0.5 / 0.9 are 1, 5, 9
    assert!((s[0].pl_q10 - 0.4).abs() < 1e-12);
    assert_eq!(s[0].pl_q50, 0.0);
    assert!((s[0].pl_q90 - 0.4).abs() < 1e-12);
    assert_eq!(s[1].crps, 0.0);
}

proptest! {
    #[test]
    fn crps_nonnegative_zero_only_for_point_mass(
        ens in prop::collection::vec(-3.0f64..3.0, 1..30),
        y in -4.0f64..4.0,
    ) {
        let v = crps(&ens, y).unwrap();
        prop_assert!(v >= 0.0);
        let point_mass = ens.iter().all(|&e| e == y);
        prop_assert_eq!(v == 0.0, point_mass);
        prop_assert_eq!(crps(&vec![y; ens.len()], y).unwrap(), 0.0);
    }

    #[test]
    fn pinball_is_convex(a in -5.0f64..5.0, b in -5.0f64..5.0, y in -5.0f64..5.0, q in 0.01f64..0.99) {
        let mid = pinball(0.5 * (a + b), y, q).unwrap();
        let avg = 0.5 * (pinball(a, y, q).unwrap() + pinball(b, y, q).unwrap());
        prop_assert!(mid <= avg + 1e-12);
        prop_assert!((pinball(a, y, 0.5).unwrap() - 0.5 * (a - y).abs()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_matches_two_pass_oracle(
        rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..20),
        point in prop::collection::vec(0.0f64..5.0, 3),
    ) {
        let g = fit_gaussian(&rows, &point).unwrap();
        let n = rows.len() as f64;
        for t in 0..3 {
            let mut mean = 0.0;
            for r in &rows { mean += r[t]; }
            mean /= n;
            let mut ss = 0.0;
            for r in &rows { ss += (r[t] - mean) * (r[t] - mean); }
            prop_assert!((g.mu[t] - (point[t] + mean)).abs() < 1e-12);
            prop_assert!((g.sigma[t] - (ss / (n - 1.0)).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn quantile_on_uniform_grid(n in 2usize..50, q in 0.001f64..0.999) {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        let v = quantile(&xs, q).unwrap();
        prop_assert!((v - 0.5 * q * (n - 1) as f64).abs() < 1e-12);
    }
}
