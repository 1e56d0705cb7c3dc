use casimir_core::material::*;
use casimir_core::quadrature::{integrate, integrate_to_infinity, QuadratureSpec};
use proptest::prelude::*;

fn log_grid() -> Vec<f64> {
    (0..=100)
        .map(|i| 1e-3 * 10f64.powf(5.0 * i as f64 / 100.0))
        .collect()
}

fn drude() -> impl Strategy<Value = DrudeParams> {
    (0.1f64..20.0, 1e-3f64..1.0).prop_map(|(omega_p, gamma)| DrudeParams { omega_p, gamma })
}

fn oscillator() -> impl Strategy<Value = OscillatorParams> {
    (1.0f64..500.0, 0.1f64..10.0, 0.5f64..25.0).prop_map(|(g0, gamma0, omega0)| OscillatorParams {
        g0,
        gamma0,
        omega0,
    })
}

fn ninham_parsegian() -> impl Strategy<Value = NinhamParsegianParams> {
    (0.1f64..5.0, 0.1f64..5.0, 0.01f64..1.0, 5.0f64..30.0).prop_map(
        |(c_ir, c_uv, omega_ir, omega_uv)| NinhamParsegianParams {
            c_ir,
            c_uv,
            omega_ir,
            omega_uv,
        },
    )
}

fn assert_physical(f: &DielectricFunction) -> std::result::Result<(), TestCaseError> {
    let mut prev = f64::INFINITY;
    for xi in log_grid() {
        let e = f.eps_imag_axis(xi).unwrap();
        prop_assert!(e.is_finite() && e >= 1.0, "ε(i{xi}) = {e}");
        prop_assert!(
            e <= prev * (1.0 + 1e-14),
            "ε rises at ξ = {xi}: {prev} -> {e}"
        );
        prev = e;
    }
    Ok(())
}

proptest! {
    #[test]
    fn drude_is_physical(p in drude()) {
        assert_physical(&DielectricFunction::Drude(p))?;
    }

    #[test]
    fn plasma_is_physical(omega_p in 0.1f64..20.0) {
        assert_physical(&DielectricFunction::Plasma(PlasmaParams { omega_p }))?;
    }

    #[test]
    fn oscillator_is_physical(p in oscillator()) {
        assert_physical(&DielectricFunction::Oscillator(p))?;
    }

    #[test]
    fn ninham_parsegian_is_physical(p in ninham_parsegian()) {
        assert_physical(&DielectricFunction::NinhamParsegian(p))?;
    }

    #[test]
    fn composites_are_physical(d in drude(), o1 in oscillator(), o2 in oscillator()) {
        let f = DielectricFunction::composite([
            DielectricFunction::Drude(d),
            DielectricFunction::Oscillator(o1),
            DielectricFunction::Oscillator(o2),
        ]);
        assert_physical(&f)?;
    }

    #[test]
    fn drude_pole_identity(p in drude(), xi in 1e-3f64..1e3) {
        let e = drude_eps_imag_axis(&p, xi).unwrap();
        let recovered = (e - 1.0) * xi * (xi + p.gamma);
        // Exact up to the rounding of 1 + χ when χ is small.
        let rounding = 4.0 * f64::EPSILON * e / (e - 1.0);
        prop_assert!((recovered / (p.omega_p * p.omega_p) - 1.0).abs() < 1e-13 + rounding);
    }

    #[test]
    fn oscillator_dispersion_relation(p in oscillator(), xi in 0.01f64..50.0) {
        // 1 + (2/π)∫ ω Im ε(ω)/(ω² + ξ²) dω, split at a few resonance widths.
        let spec = QuadratureSpec::with_rel_tol(1e-10);
        let integrand = |w: f64| w * oscillator_im_eps(&p, w) / (w * w + xi * xi);
        let split = p.omega0 + 10.0 * p.gamma0;
        let near = integrate(integrand, 0.0, p.omega0, &spec).unwrap().value
            + integrate(integrand, p.omega0, split, &spec).unwrap().value;
        let far = integrate_to_infinity(integrand, split, &spec).unwrap().value;
        let numeric = 1.0 + 2.0 / std::f64::consts::PI * (near + far);
        let closed = oscillator_eps_imag_axis(&p, xi);
        prop_assert!((numeric / closed - 1.0).abs() < 1e-6, "{numeric} vs {closed}");
    }
}

#[test]
fn transparency_at_high_frequency() {
    let au = DrudeParams {
        omega_p: 9.0,
        gamma: 0.035,
    };
    let ito = DrudeParams {
        omega_p: 1.5,
        gamma: 0.128,
    };
    for p in [au, ito] {
        assert!(drude_eps_imag_axis(&p, 1e4).unwrap() - 1.0 < 1e-6);
    }
    for omega_p in [1.3, 9.0] {
        assert!(plasma_eps_imag_axis(&PlasmaParams { omega_p }, 1e4).unwrap() - 1.0 < 1e-6);
    }
    // Oscillators decay as g₀/ξ², which reaches 1e-6 a little beyond 1e4 eV
    // for the strongest film oscillator.
    for (g0, gamma0, omega0) in [(111.52, 4.0, 8.0), (240.54, 8.5, 9.0), (280.28, 9.2, 9.8)] {
        let p = OscillatorParams { g0, gamma0, omega0 };
        let at_1e4 = oscillator_eps_imag_axis(&p, 1e4) - 1.0;
        assert!((at_1e4 * 1e8 / g0 - 1.0).abs() < 1e-2);
        assert!(oscillator_eps_imag_axis(&p, 2e4) - 1.0 < 1e-6);
    }
}

#[test]
fn ninham_parsegian_static_and_crossover() {
    let quartz = NinhamParsegianParams {
        c_ir: 1.93,
        c_uv: 1.359,
        omega_ir: 0.1378,
        omega_uv: 13.38,
    };
    assert!((ninham_parsegian_eps(&quartz, 0.0) - 4.289).abs() < 1e-12);
    let expected = 1.0 + 1.93 / 2.0 + 1.359 / (1.0 + (0.1378f64 / 13.38).powi(2));
    assert!((ninham_parsegian_eps(&quartz, 0.1378) - expected).abs() < 1e-12);
    assert!((expected - 3.32386).abs() < 1e-5);
}
