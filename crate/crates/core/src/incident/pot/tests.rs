use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn gpd_sample(n: usize, gamma: f64, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if gamma == 0.0 {
                -sigma * (1.0 - u).ln()
            } else {
                sigma / gamma * ((1.0 - u).powf(-gamma) - 1.0)
            }
        })
        .collect()
}

#[test]
fn percentile_interpolates_linearly() {
    let v = [4.0, 1.0, 3.0, 2.0];
    assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
    assert_eq!(percentile(&v, 100.0).unwrap(), 4.0);
    assert_eq!(percentile(&v, 50.0).unwrap(), 2.5);
    assert!((percentile(&v, 99.0).unwrap() - 3.97).abs() < 1e-12);
    assert!(percentile(&[], 50.0).is_err());
    assert!(percentile(&v, 101.0).is_err());
}

#[test]
fn recovers_known_gpd_parameters() {
    let y = gpd_sample(100_000, 0.1, 2.0, 42);
    let fit = fit_gpd(&y).unwrap();
    assert_eq!(fit.method, FitMethod::MaximumLikelihood);
    assert!((0.05..=0.15).contains(&fit.gamma), "{fit:?}");
    assert!((1.9..=2.1).contains(&fit.sigma), "{fit:?}");
}

#[test]
fn recovers_negative_shape() {
    let y = gpd_sample(20_000, -0.3, 1.0, 7);
    let fit = fit_gpd(&y).unwrap();
    assert!((fit.gamma + 0.3).abs() < 0.05, "{fit:?}");
    assert!((fit.sigma - 1.0).abs() < 0.05, "{fit:?}");
}

#[test]
fn exponential_tail_matches_closed_form_quantile() {
    let y = gpd_sample(100_000, 0.0, 2.0, 3);
    let fit = fit_gpd(&y).unwrap();
    let (n, q) = (y.len(), 1e-3);
    let closed = -2.0 * (q * n as f64 / n as f64).ln();
    let phi = pot_quantile(0.0, &fit, q, n, n);
    assert!(
        (phi - closed).abs() / closed < 0.02,
        "{phi} vs {closed}, {fit:?}"
    );
}

#[test]
fn quantile_is_continuous_at_zero_shape() {
    let at = |gamma| {
        pot_quantile(
            1.0,
            &GpdFit {
                gamma,
                sigma: 2.0,
                method: FitMethod::MaximumLikelihood,
            },
            1e-3,
            10_000,
            100,
        )
    };
    let exp = 1.0 - 2.0 * (1e-3f64 * 100.0).ln();
    assert_eq!(at(0.0), exp);
    assert!((at(1e-6) - exp).abs() < 1e-4);
    assert!((at(-1e-6) - exp).abs() < 1e-4);
}

#[test]
fn zero_shape_scale_is_the_mean() {
    let y = [0.5, 1.5, 2.5, 3.5];
    let (_, sigma) = profile(&y, 0.0).unwrap();
    assert_eq!(sigma, 2.0);
}

#[test]
fn threshold_decreases_with_risk() {
    let scores = gpd_sample(5_000, 0.1, 1.0, 9);
    let mut last = f64::INFINITY;
    for risk in [1e-5, 1e-4, 1e-3, 1e-2, 5e-2] {
        let s = ThresholdState::fit(
            &scores,
            &PotConfig {
                risk,
                percentile: 90.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(s.phi <= last);
        assert!(s.phi >= s.initial);
        assert!(s.fit.unwrap().sigma > 0.0);
        last = s.phi;
    }
}

#[test]
fn no_excess_puts_threshold_above_maximum() {
    let s = ThresholdState::fit(&[2.0; 100], &PotConfig::default()).unwrap();
    assert_eq!(s.initial, 2.0);
    assert!(s.phi > 2.0 && s.phi < 2.0 + 1e-6);
    let zero = ThresholdState::fit(&[0.0; 100], &PotConfig::default()).unwrap();
    assert!(zero.phi > 0.0);
}

#[test]
fn quiet_stream_has_no_labels() {
    let cal = gpd_sample(2_000, 0.0, 1.0, 10);
    let mut s = ThresholdState::fit(
        &cal,
        &PotConfig {
            percentile: 95.0,
            ..Default::default()
        },
    )
    .unwrap();
    let phi = s.phi;
    let quiet: Vec<f64> = cal.iter().map(|v| v.min(phi * 0.99)).collect();
    for &v in &quiet {
        assert!(!s.observe(v).unwrap().1);
    }
}

#[test]
fn score_equal_to_threshold_is_flagged() {
    let cal = gpd_sample(2_000, 0.0, 1.0, 11);
    let mut s = ThresholdState::fit(&cal, &PotConfig::default()).unwrap();
    let phi = s.phi;
    assert_eq!(s.observe(phi).unwrap(), (phi, true));
}

#[test]
fn injected_spike_is_the_only_label() {
    let cal = gpd_sample(3_000, 0.0, 1.0, 12);
    let max = cal.iter().copied().fold(0.0, f64::max);
    let mut stream = gpd_sample(1_000, 0.0, 1.0, 13)
        .into_iter()
        .map(|v| v.min(max))
        .collect::<Vec<_>>();
    stream[437] = 10.0 * max;
    for dynamic in [false, true] {
        let mut s = ThresholdState::fit(
            &cal,
            &PotConfig {
                percentile: 98.0,
                risk: 1e-4,
                ..Default::default()
            },
        )
        .unwrap();
        let th = s.thresholds(&stream, dynamic).unwrap();
        let flagged: Vec<usize> = stream
            .iter()
            .zip(&th)
            .enumerate()
            .filter(|(_, (a, b))| a >= b)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(flagged, vec![437], "dynamic {dynamic}");
    }
}

#[test]
fn flagged_scores_do_not_enter_the_tail() {
    let cal = gpd_sample(1_000, 0.0, 1.0, 14);
    let mut s = ThresholdState::fit(
        &cal,
        &PotConfig {
            percentile: 90.0,
            ..Default::default()
        },
    )
    .unwrap();
    let (n, k) = (s.n_total, s.n_excess);
    s.observe(s.phi * 2.0).unwrap();
    assert_eq!((s.n_total, s.n_excess), (n, k));
    s.observe(s.initial * 0.5).unwrap();
    assert_eq!((s.n_total, s.n_excess), (n + 1, k));
    let between = 0.5 * (s.initial + s.phi);
    s.observe(between).unwrap();
    assert_eq!((s.n_total, s.n_excess), (n + 2, k + 1));
}

#[test]
fn refits_after_cadence() {
    let cal = gpd_sample(1_000, 0.0, 1.0, 15);
    let cfg = PotConfig {
        percentile: 50.0,
        refit_every: 10,
        ..Default::default()
    };
    let mut s = ThresholdState::fit(&cal, &cfg).unwrap();
    let before = s.fit;
    let u = s.initial;
    for i in 0..9 {
        s.observe(u + 0.01 * (i + 1) as f64).unwrap();
    }
    assert_eq!(s.fit, before);
    s.observe(u + 0.1).unwrap();
    assert_ne!(s.fit, before);
}

#[test]
fn presets_step_down_per_horizon() {
    assert_eq!(PercentilePreset::RADSET.percentile(0), 99.0);
    assert_eq!(PercentilePreset::RADSET.percentile(3), 97.5);
    assert_eq!(
        PercentilePreset::by_name("METR-LA").unwrap().percentile(1),
        47.5
    );
    assert_eq!(
        PercentilePreset::by_name("pems").unwrap().percentile(2),
        40.0
    );
    assert!(PercentilePreset::by_name("other").is_none());
}

#[test]
fn invalid_configs_are_rejected() {
    let scores = [1.0, 2.0, 3.0];
    for cfg in [
        PotConfig {
            risk: 0.0,
            ..Default::default()
        },
        PotConfig {
            percentile: 100.0,
            ..Default::default()
        },
        PotConfig {
            refit_every: 0,
            ..Default::default()
        },
    ] {
        assert!(ThresholdState::fit(&scores, &cfg).is_err());
    }
    assert!(fit_gpd(&[]).is_err());
    assert!(fit_gpd(&[1.0, f64::NAN]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn labels_survive_power_of_two_rescaling(seed in 0u64..10_000, k in -8i32..8, dynamic in any::<bool>()) {
        let factor = 2f64.powi(k);
        let cal = gpd_sample(600, 0.2, 1.5, seed);
        let stream = gpd_sample(400, 0.2, 1.5, seed + 1);
        let cfg = PotConfig { percentile: 80.0, refit_every: 50, ..Default::default() };
        let label = |c: &[f64], s: &[f64]| {
            let mut st = ThresholdState::fit(c, &cfg).unwrap();
            let th = st.thresholds(s, dynamic).unwrap();
            s.iter().zip(th).map(|(a, b)| *a >= b).collect::<Vec<_>>()
        };
        let scaled = |v: &[f64]| v.iter().map(|x| x * factor).collect::<Vec<_>>();
        prop_assert_eq!(label(&cal, &stream), label(&scaled(&cal), &scaled(&stream)));
    }
}
