use casimir_core::calibration::{reconstruct_separation, CalibrationParams};
use casimir_core::electrostatics::*;
use casimir_core::units::{PN, VACUUM_PERMITTIVITY};
use proptest::prelude::*;

const R_UM: f64 = 101.2;

/// −πε₀R(ΔV)²/a in pN.
fn leading_term(a_nm: f64, dv_mv: f64) -> f64 {
    -std::f64::consts::PI * VACUUM_PERMITTIVITY * R_UM * 1e-6 * (dv_mv * 1e-3).powi(2)
        / (a_nm * 1e-9)
        / PN
}

#[test]
fn close_approach_follows_the_plane_capacitor_limit() {
    // a/R from 1e-6 up to just under 1e-3.
    for a in [0.1, 1.0, 10.0, 50.0, 100.0] {
        let f = exact_sphere_plane_force(a, R_UM, 68.0).unwrap();
        assert!((f / leading_term(a, 68.0) - 1.0).abs() < 0.01, "a = {a}");
    }
}

#[test]
fn series_is_attractive_and_weakens() {
    let mut prev = f64::INFINITY;
    for x in [1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0] {
        let s = image_charge_sum(x).unwrap();
        assert!(s < 0.0 && s.abs() < prev);
        prev = s.abs();
    }
}

#[test]
fn polynomial_is_certified_on_the_analysis_range() {
    let p = fit_polynomial_x(R_UM, (60.0, 2000.0)).unwrap();
    assert!(p.max_rel_error < 1e-4, "{}", p.max_rel_error);
    // Independent spot checks between the certification grid points.
    for i in 0..137 {
        let a = 60.0 + (2000.0 - 60.0) * (i as f64 + 0.37) / 137.0;
        let exact = exact_sphere_plane_force(a, R_UM, 1.0).unwrap();
        assert!((p.eval(a).unwrap() / exact - 1.0).abs() < 1e-4, "a = {a}");
    }
}

#[test]
fn narrowing_the_range_does_not_hurt() {
    let wide = fit_polynomial_x(R_UM, (60.0, 2000.0)).unwrap();
    let narrow = fit_polynomial_x(R_UM, (60.0, 600.0)).unwrap();
    assert!(narrow.max_rel_error <= wide.max_rel_error);
}

#[test]
fn electric_force_examples() {
    let p = fit_polynomial_x(R_UM, (60.0, 2000.0)).unwrap();
    let calib = CalibrationParams::exact(-196.8, 104.4, 29.6, 1.51);
    assert_eq!(electrostatic_force(100.0, -196.8, &calib, &p).unwrap(), 0.0);
    let below = electrostatic_force(100.0, -196.8 - 68.2, &calib, &p).unwrap();
    let above = electrostatic_force(100.0, -196.8 + 68.2, &calib, &p).unwrap();
    assert!((below - above).abs() <= 1e-12 * below.abs());
    let at_minus_265 = electrostatic_force(100.0, -265.0, &calib, &p).unwrap();
    let dv: f64 = -265.0 + 196.8;
    assert!((dv.abs() - 68.0).abs() < 0.5);
    assert!((at_minus_265 / exact_sphere_plane_force(100.0, R_UM, dv).unwrap() - 1.0).abs() < 1e-4);
    assert!(electrostatic_force(40.0, -265.0, &calib, &p).is_err());
}

#[test]
fn separation_is_the_contact_offset_at_rest() {
    let calib = CalibrationParams::exact(-196.8, 104.4, 29.6, 1.51);
    assert_eq!(reconstruct_separation(0.0, 0.0, &calib), 29.6);
}

proptest! {
    #[test]
    fn separation_is_linear_in_deflection(z in 0.0f64..600.0, s in -1.0f64..1.0, ds in -0.5f64..0.5) {
        let calib = CalibrationParams::exact(-196.8, 104.4, 29.6, 1.51);
        let diff = reconstruct_separation(z, s + ds, &calib) - reconstruct_separation(z, s, &calib);
        prop_assert!((diff - 104.4 * ds).abs() < 1e-9);
    }

    #[test]
    fn force_is_quadratic_in_the_voltage(a in 60.0f64..2000.0, dv in 1.0f64..200.0) {
        let one = exact_sphere_plane_force(a, R_UM, dv).unwrap();
        let two = exact_sphere_plane_force(a, R_UM, 2.0 * dv).unwrap();
        prop_assert!(one < 0.0);
        prop_assert!((two / one - 4.0).abs() < 1e-12);
    }
}
