use std::sync::OnceLock;

use casimir_core::calibration::*;
use casimir_core::electrostatics::{fit_polynomial_x, PolynomialX};
use casimir_core::stats::{gaussian_stats, mean_half_width_95};
use casimir_core::Error;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

const OFFSETS_MV: [f64; 5] = [12.0, 25.0, 40.0, 55.0, 68.0];

fn x() -> &'static PolynomialX {
    static X: OnceLock<PolynomialX> = OnceLock::new();
    X.get_or_init(|| fit_polynomial_x(101.2, (40.0, 2500.0)).unwrap())
}

fn law(a: f64) -> f64 {
    -143.7 * (80.0 / a).powf(2.6)
}

fn untreated() -> CalibrationParams {
    CalibrationParams::exact(-196.8, 104.4, 29.6, 1.51)
}

fn campaign(truth: CalibrationParams, noise_pn: f64, seed: u64) -> SynthesisSpec {
    let mut spec = SynthesisSpec::new(truth, symmetric_voltages(truth.v0_mv, &OFFSETS_MV));
    spec.noise_pn = noise_pn;
    spec.seed = seed;
    spec
}

fn agrees_to_six_digits(got: f64, want: f64) -> bool {
    (got - want).abs() <= 5e-6 * want.abs()
}

fn assert_within_stated_widths(p: &CalibrationParams, truth: &CalibrationParams) {
    assert!((p.v0_mv - truth.v0_mv).abs() <= 1.5, "V0 {}", p.v0_mv);
    assert!(
        (p.m_nm_per_v - truth.m_nm_per_v).abs() <= 0.5,
        "m {}",
        p.m_nm_per_v
    );
    assert!((p.z0_nm - truth.z0_nm).abs() <= 0.5, "z0 {}", p.z0_nm);
    assert!(
        (p.k_tilde_nn_per_v - truth.k_tilde_nn_per_v).abs() <= 0.02,
        "k {}",
        p.k_tilde_nn_per_v
    );
}

#[test]
fn noiseless_curves_give_the_truth_back() {
    for truth in [
        untreated(),
        CalibrationParams::exact(64.8, 104.2, 29.0, 1.51),
    ] {
        let curves = synthesize_curves(&campaign(truth, 0.0, 0), law, x()).unwrap();
        let p = fit_calibration(&curves, x(), &FitOptions::default())
            .unwrap()
            .params;
        assert!(agrees_to_six_digits(p.v0_mv, truth.v0_mv), "V0 {}", p.v0_mv);
        assert!(
            agrees_to_six_digits(p.m_nm_per_v, truth.m_nm_per_v),
            "m {}",
            p.m_nm_per_v
        );
        assert!(agrees_to_six_digits(p.z0_nm, truth.z0_nm), "z0 {}", p.z0_nm);
        assert!(
            agrees_to_six_digits(p.k_tilde_nn_per_v, truth.k_tilde_nn_per_v),
            "k {}",
            p.k_tilde_nn_per_v
        );
    }
}

#[test]
fn synthesis_is_consistent_with_the_separation_relation() {
    let truth = untreated();
    let curves = synthesize_curves(&campaign(truth, 0.0, 0), law, x()).unwrap();
    for c in curves.iter().step_by(7) {
        for (&z, &s) in c.z_piezo_nm.iter().zip(&c.s_def_v).step_by(50) {
            let a = reconstruct_separation(z, s, &truth);
            let force = law(a) + x().eval(a).unwrap() * (c.voltage_mv - truth.v0_mv).powi(2);
            assert!((truth.k_tilde_pn_per_v() * s - force).abs() < 1e-8 * force.abs());
        }
    }
}

#[test]
fn noisy_campaigns_land_within_the_stated_widths() {
    for (truth, seed) in [
        (untreated(), 11),
        (untreated(), 12),
        (CalibrationParams::exact(64.8, 104.2, 29.0, 1.51), 13),
    ] {
        let curves = synthesize_curves(&campaign(truth, 2.0, seed), law, x()).unwrap();
        let fit = fit_calibration(&curves, x(), &FitOptions::default()).unwrap();
        assert_within_stated_widths(&fit.params, &truth);
        assert!(!fit.trend.anomaly);
        let p = fit.params;
        for hw in [
            p.v0_hw_mv,
            p.m_hw_nm_per_v,
            p.z0_hw_nm,
            p.k_tilde_hw_nn_per_v,
        ] {
            assert!(hw > 0.0 && hw.is_finite());
        }
    }
}

#[test]
fn injected_potential_trend_is_an_anomaly() {
    let mut spec = campaign(untreated(), 2.0, 5);
    spec.v0_trend_mv_per_nm = 0.01;
    let curves = synthesize_curves(&spec, law, x()).unwrap();
    match fit_calibration(&curves, x(), &FitOptions::default()) {
        Err(Error::CalibrationAnomaly { change_mv, .. }) => assert!(change_mv > 1.5),
        other => panic!("expected an anomaly, got {other:?}"),
    }
}

#[test]
fn drift_correction_recovers_a_linear_drift() {
    let mut truth = untreated();
    truth.drift_nm_per_curve = 0.01;
    let curves = synthesize_curves(&campaign(truth, 0.0, 0), law, x()).unwrap();
    let opts = FitOptions {
        drift_correction: true,
        ..FitOptions::default()
    };
    let p = fit_calibration(&curves, x(), &opts).unwrap().params;
    assert!(
        (p.drift_nm_per_curve - 0.01).abs() < 1e-5,
        "{}",
        p.drift_nm_per_curve
    );
    assert!((p.z0_nm - 29.6).abs() < 1e-3);
    assert!((p.z0_for(Some(50)) - 30.1).abs() < 1e-3);
}

#[test]
fn too_few_voltages_are_rejected() {
    let mut spec = campaign(untreated(), 0.0, 0);
    spec.voltages_mv = vec![-250.0, -150.0];
    let curves = synthesize_curves(&spec, law, x()).unwrap();
    assert!(fit_calibration(&curves, x(), &FitOptions::default()).is_err());
}

#[test]
fn extraction_with_the_truth_reproduces_the_force_law() {
    let truth = untreated();
    let curves = synthesize_curves(&campaign(truth, 0.0, 0), law, x()).unwrap();
    let forces = extract_casimir(&curves, &truth, x(), (60.0, 300.0), 1.0).unwrap();
    for (a, f) in forces.a_nm.iter().zip(forces.mean()) {
        // Linear interpolation of a smooth curve on a 1 nm grid.
        assert!(
            (f - law(*a)).abs() < 1e-3 * law(*a).abs() + 1e-3,
            "a = {a}: {f}"
        );
    }
    let j = forces.index_of(80.0).unwrap();
    assert!((forces.mean()[j] + 143.7).abs() < 0.1);
}

#[test]
fn extracted_force_does_not_depend_on_voltage() {
    let truth = untreated();
    let curves = synthesize_curves(&campaign(truth, 0.0, 0), law, x()).unwrap();
    let forces = extract_casimir(&curves, &truth, x(), (60.0, 600.0), 1.0).unwrap();
    for j in 0..forces.a_nm.len() {
        let by_v = forces.mean_by_voltage(j);
        let lo = by_v.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
        let hi = by_v.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        // Only interpolation error remains; it peaks where curves approach snap-in.
        assert!(
            hi - lo < 1e-3 * lo.abs(),
            "a = {}: spread {}",
            forces.a_nm[j],
            hi - lo
        );
    }
}

#[test]
fn noisy_per_voltage_means_agree_within_random_error() {
    let truth = untreated();
    let curves = synthesize_curves(&campaign(truth, 2.0, 21), law, x()).unwrap();
    let fit = fit_calibration(&curves, x(), &FitOptions::default()).unwrap();
    let forces = extract_casimir(&curves, &fit.params, x(), (60.0, 600.0), 1.0).unwrap();
    let budget = error_budget(&forces, &fit.params, x(), &SystematicSpec::default()).unwrap();
    let mut checked = 0;
    let mut agree = 0;
    for (j, row) in budget.iter().enumerate() {
        for (v, f, n) in forces.mean_by_voltage(j) {
            if n < 2 {
                continue;
            }
            let own: Vec<f64> = forces.samples[j]
                .iter()
                .filter(|s| s.voltage_mv == v)
                .map(|s| s.force_pn)
                .collect();
            let tolerance = row.total_pn + mean_half_width_95(&own).unwrap_or(0.0);
            checked += 1;
            if (f - row.mean_pn).abs() <= tolerance {
                agree += 1;
            }
        }
    }
    assert!(agree as f64 >= 0.99 * checked as f64, "{agree}/{checked}");
}

fn budget_for(samples: Vec<Vec<f64>>, calib: &CalibrationParams) -> Vec<ErrorBudgetRow> {
    let a_nm = (0..samples.len()).map(|j| 100.0 + j as f64).collect();
    let forces = ExtractedForces {
        a_nm,
        samples: samples
            .into_iter()
            .map(|fs| {
                fs.into_iter()
                    .enumerate()
                    .map(|(i, force_pn)| ForceSample {
                        force_pn,
                        voltage_mv: calib.v0_mv + [-68.0, 68.0][i % 2],
                        s_def_v: -0.1,
                    })
                    .collect()
            })
            .collect(),
    };
    error_budget(&forces, calib, x(), &SystematicSpec::default()).unwrap()
}

#[test]
fn budget_components_add_in_quadrature() {
    let mut calib = untreated();
    calib.v0_hw_mv = 1.5;
    calib.z0_hw_nm = 0.5;
    calib.m_hw_nm_per_v = 0.5;
    calib.k_tilde_hw_nn_per_v = 0.02;
    let rows = budget_for(
        vec![vec![-100.0, -102.0, -99.0, -101.5], vec![-50.0; 6]],
        &calib,
    );
    for r in &rows {
        let identity = r.total_pn.powi(2) - r.random_pn.powi(2) - r.systematic_pn.powi(2);
        assert!(identity.abs() <= 1e-12 * r.total_pn.powi(2));
        assert!(r.systematic_pn >= SystematicSpec::default().noise_floor_pn);
    }
    assert_eq!(rows[1].random_pn, 0.0);
    assert!((rows[0].separation_nm - 0.5f64.hypot(0.05)).abs() < 1e-12);
}

#[test]
fn random_error_scales_with_sample_count_and_not_separation() {
    let calib = untreated();
    let normal = Normal::new(0.0, 2.0).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let draws = |n: usize, rng: &mut rand::rngs::StdRng| -> Vec<Vec<f64>> {
        (0..400)
            .map(|_| (0..n).map(|_| -100.0 + normal.sample(rng)).collect())
            .collect()
    };
    let small = budget_for(draws(100, &mut rng), &calib);
    let large = budget_for(draws(200, &mut rng), &calib);
    let avg =
        |rows: &[ErrorBudgetRow]| rows.iter().map(|r| r.random_pn).sum::<f64>() / rows.len() as f64;
    let ratio = avg(&small) / avg(&large);
    assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.03, "{ratio}");
    // Stationary noise: the first and second halves of the grid agree.
    let (near, far) = small.split_at(200);
    assert!((avg(near) / avg(far) - 1.0).abs() < 0.05);
}

#[test]
fn budget_csv_round_trips() {
    let rows = budget_for(
        vec![vec![-100.0, -102.0, -99.0], vec![-50.0, -51.0]],
        &untreated(),
    );
    let mut buf = Vec::new();
    write_budget_csv(&mut buf, &rows).unwrap();
    let back = read_budget_csv(buf.as_slice(), "buf").unwrap();
    for (a, b) in rows.iter().zip(&back) {
        assert_eq!(a.a_nm, b.a_nm);
        assert_eq!(a.samples, b.samples);
        assert!((a.total_pn - b.total_pn).abs() <= 1e-6 * a.total_pn);
    }
}

#[test]
fn measured_distributions_with_and_without_carriers_separate() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(3);
    let on: Vec<f64> = Normal::new(-143.7, 4.0)
        .unwrap()
        .sample_iter(&mut rng)
        .take(100)
        .collect();
    let off: Vec<f64> = Normal::new(-105.5, 4.0)
        .unwrap()
        .sample_iter(&mut rng)
        .take(100)
        .collect();
    let g_on = gaussian_stats(&on, 2.0).unwrap();
    let g_off = gaussian_stats(&off, 2.0).unwrap();
    assert!(!g_on.overlaps(&g_off));
    assert!(g_on.overlaps(&g_on));
    assert!((g_on.mean + 143.7).abs() < 3.0 * 4.0 / 10.0);
    assert!((g_on.sigma / 4.0 - 1.0).abs() < 0.25);
    assert!((g_on.histogram.iter().map(|h| h.1).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(gaussian_stats(&on[..10], 2.0).is_err());
}

#[test]
fn curve_files_round_trip_through_a_directory() {
    let dir = std::env::temp_dir().join(format!("casimir-curves-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let curves = synthesize_curves(&campaign(untreated(), 2.0, 1), law, x()).unwrap();
    for (i, c) in curves.iter().enumerate().take(6) {
        c.write_csv(std::fs::File::create(dir.join(format!("curve_{i:03}.csv"))).unwrap())
            .unwrap();
    }
    let mut back = load_curve_dir(&dir).unwrap();
    back.sort_by_key(|c| c.sequence);
    assert_eq!(back.len(), 6);
    for (a, b) in curves.iter().zip(&back) {
        assert_eq!(a.voltage_mv, b.voltage_mv);
        assert_eq!(a.z_piezo_nm.len(), b.z_piezo_nm.len());
        for (x, y) in a.s_def_v.iter().zip(&b.s_def_v) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-6));
        }
    }
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn binned_curves_average_samples() {
    let c = ForceDistanceCurve::new(
        0.0,
        0,
        None,
        vec![0.0, 0.2, 0.4, 1.0, 1.2],
        vec![1.0, 2.0, 3.0, 4.0, 6.0],
    )
    .unwrap();
    let b = c.binned(1.0);
    assert_eq!(b.counts.iter().sum::<usize>(), 5);
    let total: f64 = b
        .s_v
        .iter()
        .zip(&b.counts)
        .map(|(s, &n)| s * n as f64)
        .sum();
    assert!((total - 16.0).abs() < 1e-12);
}
