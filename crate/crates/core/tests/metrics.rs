mod common;
mod oracles;

use common::*;
use hiercvae_core::metrics::*;
use hiercvae_core::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn sample<R: Rng>(r: &mut R, n: usize, shift: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(r);
            shift + e * 2.0 + 0.3 * e * e
        })
        .collect()
}

#[test]
fn perfect_fit() {
    let y = [1.0, -2.0, 3.5, 0.25];
    let p = point_metrics(&y, &y).unwrap();
    assert_eq!((p.mse, p.mae, p.mape_pct, p.smape_pct, p.r2), (0.0, 0.0, 0.0, 0.0, 1.0));
    let d = distribution_metrics(&y, &y).unwrap();
    assert_eq!((d.wasserstein, d.ks, d.skew_diff), (0.0, 0.0, 0.0));
}

#[test]
fn percentage_errors_by_hand() {
    let p = point_metrics(&[100.0], &[110.0]).unwrap();
    assert!((p.mape_pct - 10.0).abs() < 1e-12);
    assert!((p.smape_pct - 1000.0 / 105.0).abs() < 1e-12);
    assert!((p.smape_pct - 9.5238).abs() < 1e-4);
}

#[test]
fn zero_truths_are_skipped_in_mape() {
    let p = point_metrics(&[0.0, 2.0, 0.0], &[1.0, 3.0, 0.0]).unwrap();
    assert_eq!(p.skipped_mape_points, 2);
    assert!((p.mape_pct - 50.0).abs() < 1e-12);
    // 0/0 counts as zero in SMAPE: (200 + 40 + 0) / 3
    assert!((p.smape_pct - 80.0).abs() < 1e-12);
}

#[test]
fn predicting_the_mean_gives_zero_r2() {
    let y = [1.0, 4.0, 2.0, 9.0];
    let m = y.iter().sum::<f64>() / 4.0;
    assert!(point_metrics(&y, &[m; 4]).unwrap().r2.abs() < 1e-15);
}

#[test]
fn flat_truth_r2_sentinels() {
    assert_eq!(point_metrics(&[3.0; 4], &[3.0; 4]).unwrap().r2, 1.0);
    assert_eq!(point_metrics(&[3.0; 4], &[3.0, 3.0, 3.1, 3.0]).unwrap().r2, f64::NEG_INFINITY);
}

#[test]
fn shape_errors() {
    assert!(matches!(point_metrics(&[], &[]), Err(Error::Contract(_))));
    assert!(matches!(point_metrics(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
    assert!(matches!(distribution_metrics(&[], &[1.0]), Err(Error::Contract(_))));
    assert!(matches!(calibration_metrics(&[1.0], &[1.0], &[0.0]), Err(Error::Contract(_))));
    assert!(matches!(calibration_metrics(&[1.0], &[1.0], &[-1.0]), Err(Error::Contract(_))));
}

#[test]
fn translation_and_disjoint_supports() {
    let y = [0.3, -1.0, 2.0, 5.5, 0.0];
    for c in [-3.0, 0.5, 10.0] {
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        assert!((wasserstein(&y, &shifted).unwrap() - c.abs()).abs() < 1e-12);
    }
    assert_eq!(ks_statistic(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
}

#[test]
fn calibration_extremes() {
    let means = [1.0, 2.0, 3.0];
    let c = calibration_metrics(&means, &means, &[0.5; 3]).unwrap();
    assert_eq!(c.picp95, 1.0);
    assert!((c.ece - 0.5).abs() < 1e-12);
    let far = [101.0, -98.0, 103.0];
    let c = calibration_metrics(&far, &means, &[0.5; 3]).unwrap();
    assert_eq!(c.picp95, 0.0);
    assert!((c.ece - 0.5).abs() < 1e-12);
}

fn calibrated(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let means: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
    let sigmas: Vec<f64> = (0..n).map(|_| r.random_range(0.1..3.0)).collect();
    let y = means.iter().zip(&sigmas).map(|(&m, &s)| Normal::new(m, s).unwrap().sample(&mut r)).collect();
    (y, means, sigmas)
}

#[test]
fn calibrated_monte_carlo() {
    let (y, m, s) = calibrated(100_000, 1);
    let c = calibration_metrics(&y, &m, &s).unwrap();
    assert!(c.ece <= 0.01, "{c:?}");
    assert!((c.picp95 - 0.95).abs() <= 0.005, "{c:?}");
    let (y3, m3, s3) = calibrated(1_000, 2);
    let small = calibration_metrics(&y3, &m3, &s3).unwrap();
    assert!(c.ece < small.ece, "{} vs {}", c.ece, small.ece);
}

#[test]
fn metrics_match_brute_force_on_random_samples() {
    let std_normal = StatNormal::new(0.0, 1.0).unwrap();
    let mut r = rng(3);
    for trial in 0..20 {
        let y = sample(&mut r, 200, 1.0);
        let yh: Vec<f64> = y.iter().map(|v| v + r.random_range(-1.0..1.0)).collect();
        let sig: Vec<f64> = (0..200).map(|_| r.random_range(0.2..2.0)).collect();
        let p = point_metrics(&y, &yh).unwrap();
        let n = 200.0;
        let mse: f64 = (0..200).map(|i| (y[i] - yh[i]).powi(2)).sum::<f64>() / n;
        let mae: f64 = (0..200).map(|i| (y[i] - yh[i]).abs()).sum::<f64>() / n;
        let mape: f64 = (0..200).map(|i| ((y[i] - yh[i]) / y[i]).abs()).sum::<f64>() / n * 100.0;
        let smape: f64 = (0..200).map(|i| (y[i] - yh[i]).abs() / ((y[i].abs() + yh[i].abs()) / 2.0)).sum::<f64>() / n * 100.0;
        let ybar = y.iter().sum::<f64>() / n;
        let r2 = 1.0 - (0..200).map(|i| (y[i] - yh[i]).powi(2)).sum::<f64>() / y.iter().map(|v| (v - ybar).powi(2)).sum::<f64>();
        for (got, want) in [(p.mse, mse), (p.mae, mae), (p.mape_pct, mape), (p.smape_pct, smape), (p.r2, r2)] {
            assert!(close(got, want, 1e-12), "trial {trial}: {got} vs {want}");
        }
        let d = distribution_metrics(&y, &yh).unwrap();
        assert!(close(d.wasserstein, oracles::metrics::w1_integral(&y, &yh), 1e-12));
        assert!(close(d.ks, oracles::metrics::ks(&y, &yh), 1e-12));
        assert!(close(d.skew_diff, (oracles::metrics::skew(&y) - oracles::metrics::skew(&yh)).abs(), 1e-12));
        let c = calibration_metrics(&y, &yh, &sig).unwrap();
        let ece = ECE_LEVELS
            .iter()
            .map(|&lvl| (oracles::metrics::coverage(&y, &yh, &sig, std_normal.inverse_cdf(0.5 + lvl / 2.0)) - lvl).abs())
            .sum::<f64>()
            / 9.0;
        assert!(close(c.ece, ece, 1e-12));
        assert!(close(c.picp95, oracles::metrics::coverage(&y, &yh, &sig, 1.96), 1e-12));

        let other = sample(&mut r, 150, 0.5);
        assert!(close(wasserstein(&y, &other).unwrap(), oracles::metrics::w1_grid(&y, &other, W1_GRID), 1e-12));
        assert!(close(ks_statistic(&y, &other).unwrap(), oracles::metrics::ks(&y, &other), 1e-12));
    }
}

#[test]
fn unequal_size_w1_approaches_the_integral() {
    let mut r = rng(4);
    let a = sample(&mut r, 400, 0.0);
    let b = sample(&mut r, 250, 0.7);
    let exact = oracles::metrics::w1_integral(&a, &b);
    assert!((wasserstein(&a, &b).unwrap() - exact).abs() < 0.02 * exact.max(0.1));
}

#[test]
fn wasserstein_is_a_metric_on_equal_sizes() {
    let mut r = rng(5);
    for _ in 0..100 {
        let n = r.random_range(1..30);
        let [a, b, c] = [0.0, 0.5, -1.0].map(|s| sample(&mut r, n, s));
        let (ab, ba, bc, ac) = (wasserstein(&a, &b).unwrap(), wasserstein(&b, &a).unwrap(), wasserstein(&b, &c).unwrap(), wasserstein(&a, &c).unwrap());
        assert_eq!(ab, ba);
        assert_eq!(wasserstein(&a, &a).unwrap(), 0.0);
        assert!(ab > 0.0);
        assert!(ac <= ab + bc + 1e-12);
    }
}

fn report_inputs(y: &[f64], m: &[f64], s: &[f64]) -> (Vec<ForecastPoint>, Vec<Observation>) {
    let f = m.iter().zip(s).enumerate().map(|(i, (&mean, &sigma))| ForecastPoint { timestamp: i as i64 * 10, mean, sigma }).collect();
    let t = y.iter().enumerate().map(|(i, &value)| Observation { timestamp: i as i64 * 10, value }).collect();
    (f, t)
}

#[test]
fn report_fields_match_recomputed_metrics() {
    let (y, m, s) = calibrated(300, 6);
    let (f, t) = report_inputs(&y, &m, &s);
    let rep = build_report("load", "test", &f, &t).unwrap();
    let p = point_metrics(&y, &m).unwrap();
    let d = distribution_metrics(&y, &m).unwrap();
    let c = calibration_metrics(&y, &m, &s).unwrap();
    let v = rep.metrics;
    assert_eq!((rep.n_points, rep.target.as_str(), rep.split.as_str()), (300, "load", "test"));
    for (got, want) in [(v.mse, p.mse), (v.mae, p.mae), (v.mape_pct, p.mape_pct), (v.smape_pct, p.smape_pct), (v.r2, p.r2), (v.wasserstein, d.wasserstein), (v.ks, d.ks), (v.skew_diff, d.skew_diff), (v.ece, c.ece), (v.picp95, c.picp95)] {
        assert!(close(got, want, 1e-12));
    }
    let perfect = build_report("load", "test", &report_inputs(&y, &y, &s).0, &t).unwrap();
    assert_eq!(perfect.metrics.mse, 0.0);
    assert_eq!(perfect.metrics.picp95, 1.0);
}

#[test]
fn report_rejects_misalignment_and_empty_input() {
    let (f, mut t) = report_inputs(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[1.0; 3]);
    assert!(matches!(build_report("y", "test", &[], &[]), Err(Error::Contract(_))));
    t[1].timestamp = 11;
    match build_report("y", "test", &f, &t) {
        Err(Error::Contract(msg)) => assert!(msg.contains("10") && msg.contains("11"), "{msg}"),
        other => panic!("{other:?}"),
    }
    match build_report("y", "test", &f, &t[..1]) {
        Err(Error::Contract(msg)) => assert!(msg.contains("20") && msg.contains("unmatched"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ks_ignores_increasing_transforms(a in prop::collection::vec(-5.0f64..5.0, 1..40), b in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let ea: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let eb: Vec<f64> = b.iter().map(|v| v.exp()).collect();
        prop_assert_eq!(ks_statistic(&a, &b).unwrap(), ks_statistic(&ea, &eb).unwrap());
    }

    #[test]
    fn picp_shrinks_with_sigma(seed in 0u64..10_000, factor in 0.01f64..1.0) {
        let (y, m, s) = calibrated(200, seed);
        let scaled: Vec<f64> = s.iter().map(|v| v * factor).collect();
        let before = calibration_metrics(&y, &m, &s).unwrap().picp95;
        let after = calibration_metrics(&y, &m, &scaled).unwrap().picp95;
        prop_assert!(after <= before);
    }

    #[test]
    fn metric_ranges(seed in 0u64..10_000, n in 2usize..60) {
        let (y, m, s) = calibrated(n, seed);
        let p = point_metrics(&y, &m).unwrap();
        let d = distribution_metrics(&y, &m).unwrap();
        let c = calibration_metrics(&y, &m, &s).unwrap();
        prop_assert!(p.mse >= 0.0 && p.mae >= 0.0 && p.r2 <= 1.0 && d.wasserstein >= 0.0);
        prop_assert!((0.0..=1.0).contains(&d.ks) && (0.0..=1.0).contains(&c.ece) && (0.0..=1.0).contains(&c.picp95));
    }
}
