use pendulum_uq::pendulum::{
    generate_dataset, generate_ood_dataset, Interval, OodSpec, PendulumConfig, SplitTag,
};
use pendulum_uq::propagation::propagate;

/// Two-sample Kolmogorov–Smirnov statistic.
fn ks_statistic(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic two-sample critical value at α = 0.01.
fn ks_critical_01(na: usize, nb: usize) -> f64 {
    let (na, nb) = (na as f64, nb as f64);
    1.628 * ((na + nb) / (na * nb)).sqrt()
}

#[test]
fn per_sample_period_spread_matches_drawn_noise() {
    let cfg = PendulumConfig {
        period_noise_range: Interval::new(0.01, 0.20),
        seed: 501,
        ..PendulumConfig::default()
    };
    let data = generate_dataset(&cfg, 100_000, SplitTag::Train).unwrap();
    let mut within = 0usize;
    for s in &data.samples {
        let rel: Vec<f64> = s.period_measurements.iter().map(|t| t / s.period_true - 1.0).collect();
        let n = rel.len() as f64;
        let mean = rel.iter().sum::<f64>() / n;
        let sd = (rel.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // Standard error of a sample stdev from n normal draws.
        let se = s.nu / (2.0 * (n - 1.0)).sqrt();
        if (sd - s.nu).abs() <= 3.0 * se {
            within += 1;
        }
    }
    let frac = within as f64 / data.len() as f64;
    assert!(frac >= 0.99, "only {frac} of samples within 3 standard errors");
}

#[test]
fn drawn_noise_levels_cover_the_range() {
    let cfg = PendulumConfig {
        period_noise_range: Interval::new(0.01, 0.05),
        seed: 502,
        ..PendulumConfig::default()
    };
    let data = generate_dataset(&cfg, 20_000, SplitTag::Train).unwrap();
    let nus: Vec<f64> = data.samples.iter().map(|s| s.nu).collect();
    assert!(nus.iter().all(|&v| (0.01..0.05).contains(&v)));
    let mean = nus.iter().sum::<f64>() / nus.len() as f64;
    assert!((mean - 0.03).abs() < 3.0 * 0.04 / 12f64.sqrt() / (nus.len() as f64).sqrt());
}

#[test]
fn degenerate_length_shift_matches_training_distribution() {
    let cfg = PendulumConfig {
        seed: 503,
        ..PendulumConfig::default()
    };
    let n = 5000;
    let train = generate_dataset(&cfg, n, SplitTag::Train).unwrap();
    let spec = OodSpec::shift_l(cfg.l_range.lower, cfg.l_range.upper);
    let shifted = generate_ood_dataset(&PendulumConfig { seed: 504, ..cfg.clone() }, &spec, n).unwrap();
    let crit = ks_critical_01(n, n);
    for (name, f) in [
        ("g", (|s: &pendulum_uq::pendulum::PendulumSample| s.g_true) as fn(&_) -> f64),
        ("L", |s| s.length_true),
        ("T", |s| s.period_true),
    ] {
        let d = ks_statistic(
            train.samples.iter().map(f).collect(),
            shifted.samples.iter().map(f).collect(),
        );
        assert!(d < crit, "{name}: KS statistic {d} exceeds {crit}");
    }
}

#[test]
fn ks_statistic_detects_a_real_shift() {
    let cfg = PendulumConfig {
        seed: 505,
        ..PendulumConfig::default()
    };
    let train = generate_dataset(&cfg, 2000, SplitTag::Train).unwrap();
    let far = generate_ood_dataset(&cfg, &OodSpec::shift_l(0.8, 1.2), 2000).unwrap();
    let d = ks_statistic(
        train.samples.iter().map(|s| s.length_true).collect(),
        far.samples.iter().map(|s| s.length_true).collect(),
    );
    assert_eq!(d, 1.0);
}

#[test]
fn length_shift_keeps_g_in_training_range() {
    let cfg = PendulumConfig {
        seed: 506,
        ..PendulumConfig::default()
    };
    let data = generate_ood_dataset(&cfg, &OodSpec::shift_l(1.6, 2.4), 5000).unwrap();
    assert_eq!(data.split_tag, SplitTag::Ood);
    for s in &data.samples {
        assert!((5.0..15.0).contains(&s.g_true));
        assert!((1.6..2.4).contains(&s.length_true));
        let t = 2.0 * std::f64::consts::PI * (s.length_true / s.g_true).sqrt();
        assert!((s.period_true / t - 1.0).abs() < 1e-14);
    }
}

#[test]
fn gravity_shift_leaves_training_range() {
    let cfg = PendulumConfig {
        seed: 507,
        ..PendulumConfig::default()
    };
    let data = generate_ood_dataset(&cfg, &OodSpec::shift_g(15.0, 25.0), 5000).unwrap();
    for s in &data.samples {
        assert!(s.g_true > 15.0 && s.g_true < 25.0);
        assert!((0.2..0.8).contains(&s.length_true));
    }
}

#[test]
fn full_size_training_set_respects_ranges() {
    let cfg = PendulumConfig::default();
    let data = generate_dataset(&cfg, 90_000, SplitTag::Train).unwrap();
    assert_eq!(data.len(), 90_000);
    assert!(data
        .samples
        .iter()
        .all(|s| (5.0..15.0).contains(&s.g_true) && (0.2..0.8).contains(&s.length_true)));
    assert_eq!(data.inputs().ncols(), 13);
}

#[test]
fn noiseless_data_has_exact_analytic_floor() {
    let cfg = PendulumConfig {
        period_noise_range: Interval::new(0.0, 0.0),
        seed: 508,
        ..PendulumConfig::default()
    };
    let data = generate_dataset(&cfg, 200, SplitTag::Test).unwrap();
    for s in &data.samples {
        assert_eq!(propagate(s, 0.02).unwrap().sigma_rel, 0.02);
    }
    let silent = PendulumConfig {
        length_noise: 0.0,
        ..cfg
    };
    for s in &generate_dataset(&silent, 200, SplitTag::Test).unwrap().samples {
        assert_eq!(propagate(s, 0.0).unwrap().sigma_rel, 0.0);
    }
}
