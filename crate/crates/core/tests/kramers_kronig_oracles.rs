use std::time::Instant;

use casimir_core::kramers_kronig::*;
use casimir_core::lifshitz::matsubara_frequency;
use casimir_core::material::*;
use casimir_core::reference::{matsubara_xi_grid, Film, ItoCore, Prescription, TEMPERATURE_K};
use proptest::prelude::*;

fn measured_range(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.04 * (8.27f64 / 0.04).powf(i as f64 / (n - 1) as f64))
        .collect()
}

fn xi_check_grid() -> Vec<f64> {
    (0..=40)
        .map(|i| 0.05 * 400f64.powf(i as f64 / 40.0))
        .collect()
}

#[test]
fn oscillator_table_reproduces_closed_form() {
    let p = OscillatorParams {
        g0: 111.52,
        gamma0: 4.0,
        omega0: 8.0,
    };
    let t0 = Instant::now();
    let table =
        OpticalDataTable::from_fn(measured_range(200), |w| oscillator_im_eps(&p, w)).unwrap();
    let ext = ExtrapolationSpec {
        low: Absorption::Oscillator(p),
        high: Absorption::Oscillator(p),
    };
    for xi in xi_check_grid() {
        let got = kk_transform(&table, &ext, xi).unwrap();
        let want = oscillator_eps_imag_axis(&p, xi);
        assert!((got / want - 1.0).abs() < 5e-3, "ξ = {xi}: {got} vs {want}");
    }
    assert!(t0.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn drude_table_reproduces_closed_form() {
    let p = DrudeParams {
        omega_p: 1.5,
        gamma: 0.128,
    };
    let table =
        OpticalDataTable::from_fn(measured_range(200), |w| drude_im_eps(&p, w).unwrap()).unwrap();
    let ext = ExtrapolationSpec {
        low: Absorption::Drude(p),
        high: Absorption::Drude(p),
    };
    for xi in xi_check_grid() {
        let got = kk_transform(&table, &ext, xi).unwrap();
        let want = drude_eps_imag_axis(&p, xi).unwrap();
        assert!((got / want - 1.0).abs() < 5e-3, "ξ = {xi}: {got} vs {want}");
    }
}

#[test]
fn transform_decays_at_very_large_xi() {
    let table = Film::Untreated.table().unwrap();
    let (lower, upper) = Film::Untreated.extrapolations();
    for ext in [lower, upper] {
        let e = kk_transform(&table, &ext, 1e4).unwrap();
        assert!(e > 1.0 && e < 1.001, "{e}");
    }
}

#[test]
fn carriers_on_minus_off_is_the_drude_term() {
    let film = Film::Untreated;
    let table = film.table().unwrap();
    let (lower, upper) = film.extrapolations();
    let grid = matsubara_xi_grid(TEMPERATURE_K, 100.0).unwrap();
    let (on_lo, on_up) = build_curve(&table, &lower, &upper, &grid, Carriers::On).unwrap();
    let (off_lo, off_up) = build_curve(&table, &lower, &upper, &grid, Carriers::Off).unwrap();
    let drude = film.drude();
    for (on, off) in [(&on_lo, &off_lo), (&on_up, &off_up)] {
        for ((&xi, &a), &b) in grid.iter().zip(on.eps()).zip(off.eps()) {
            let term = drude_eps_imag_axis(&drude, xi).unwrap() - 1.0;
            assert!(((a - b) - term).abs() <= 1e-9 * term.max(1.0), "ξ = {xi}");
        }
    }
    // Large and positive at the first Matsubara frequency.
    let xi1 = matsubara_frequency(1, TEMPERATURE_K).unwrap();
    assert!(on_lo.eval(xi1) - off_lo.eval(xi1) > 50.0);
}

#[test]
fn ito_first_matsubara_ratio_is_about_seventeen() {
    let grid = matsubara_xi_grid(TEMPERATURE_K, 60.0).unwrap();
    for film in [Film::Untreated, Film::UvTreated] {
        let table = film.table().unwrap();
        let (lower, upper) = film.extrapolations();
        let (on, _) = build_curve(&table, &lower, &upper, &grid, Carriers::On).unwrap();
        let (off, _) = build_curve(&table, &lower, &upper, &grid, Carriers::Off).unwrap();
        let ratio = first_matsubara_ratio(&on, &off, TEMPERATURE_K).unwrap();
        assert!((ratio / 17.0 - 1.0).abs() < 0.3, "{film:?}: {ratio}");
    }
}

#[test]
fn ratio_needs_a_covering_grid() {
    let c = PermittivityCurve::new("high", vec![1.0, 2.0], vec![2.0, 1.5]).unwrap();
    assert!(first_matsubara_ratio(&c, &c, TEMPERATURE_K).is_err());
}

#[test]
fn core_matches_the_permittivity_used_in_stacks() {
    let film = Film::UvTreated;
    let grid = matsubara_xi_grid(TEMPERATURE_K, 100.0).unwrap();
    let core = ItoCore::compute(film, &film.table().unwrap(), &grid).unwrap();
    let on = core.permittivity(true, true, Prescription::Drude);
    let off = core.permittivity(true, false, Prescription::Drude);
    for &xi in &grid[1..20] {
        let diff = on.eps_imag_axis(xi).unwrap() - off.eps_imag_axis(xi).unwrap();
        let term = drude_eps_imag_axis(&film.drude(), xi).unwrap() - 1.0;
        assert!((diff / term - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stronger_high_extrapolation_gives_higher_curve(
        g0 in 10.0f64..400.0,
        gamma0 in 1.0f64..10.0,
        omega0 in 5.0f64..15.0,
        boost in 1.0f64..3.0,
    ) {
        let table = Film::Untreated.table().unwrap();
        let low = Absorption::Drude(Film::Untreated.drude());
        let weak = OscillatorParams { g0, gamma0, omega0 };
        let strong = OscillatorParams { g0: g0 * boost, ..weak };
        let ext_b = ExtrapolationSpec { low: low.clone(), high: Absorption::Oscillator(weak) };
        let ext_a = ExtrapolationSpec { low, high: Absorption::Oscillator(strong) };
        let grid: Vec<f64> = (0..12).map(|i| 0.05 * 1000f64.powf(i as f64 / 11.0)).collect();
        let (b, a) = build_curve(&table, &ext_b, &ext_a, &grid, Carriers::Off).unwrap();
        for (ea, eb) in a.eps().iter().zip(b.eps()) {
            prop_assert!(ea >= eb, "{ea} < {eb}");
        }
    }

    #[test]
    fn curves_stay_above_one(xi in 1e-3f64..1e3) {
        let table = Film::UvTreated.table().unwrap();
        let (lower, upper) = Film::UvTreated.extrapolations();
        for ext in [lower, upper] {
            prop_assert!(kk_transform(&table, &ext, xi).unwrap() >= 1.0);
        }
    }
}

#[test]
fn malformed_tables_are_rejected() {
    assert!(OpticalDataTable::new(vec![], vec![]).is_err());
    assert!(OpticalDataTable::new(vec![1.0, 0.5], vec![1.0, 1.0]).is_err());
    assert!(OpticalDataTable::new(vec![0.5, 1.0], vec![1.0, -1.0]).is_err());
    let text = "omega_ev,im_eps\n# comment\n0.1,2.0\n0.2,1.0\n";
    let t = OpticalDataTable::from_reader(text.as_bytes(), "inline").unwrap();
    assert_eq!(t.omega(), &[0.1, 0.2]);
    assert!(
        OpticalDataTable::from_reader("omega,im\n0.1,1\n0.2,1\n".as_bytes(), "inline").is_err()
    );
}
