use casimir_core::lifshitz::{pfa_sphere_plate_force, MatsubaraSpec};
use casimir_core::quadrature::QuadratureSpec;
use casimir_core::reference::{
    matsubara_xi_grid, roughness_au, roughness_ito, Film, ItoCore, Prescription, SPHERE_RADIUS_UM,
    TEMPERATURE_K,
};
use casimir_core::roughness::*;
use casimir_core::Result;
use proptest::prelude::*;

fn power_law(n: i32) -> impl Fn(f64) -> Result<f64> {
    move |a: f64| Ok(-1e6 / a.powi(n))
}

/// Nested loop over bin pairs, written independently of the library.
fn brute_force(
    f: &dyn Fn(f64) -> f64,
    p1: &RoughnessProfile,
    p2: &RoughnessProfile,
    a: f64,
) -> f64 {
    let h0_1: f64 = p1
        .fractions()
        .iter()
        .zip(p1.heights())
        .map(|(v, h)| v * h)
        .sum();
    let h0_2: f64 = p2
        .fractions()
        .iter()
        .zip(p2.heights())
        .map(|(v, h)| v * h)
        .sum();
    let mut total = 0.0;
    for i in 0..p1.len() {
        for k in 0..p2.len() {
            let local = a + h0_1 + h0_2 - p1.heights()[i] - p2.heights()[k];
            total += p1.fractions()[i] * p2.fractions()[k] * f(local);
        }
    }
    total
}

fn profile(n: usize) -> impl Strategy<Value = RoughnessProfile> {
    (
        prop::collection::vec(0.01f64..1.0, n),
        prop::collection::vec(0.1f64..2.0, n),
    )
        .prop_map(|(w, steps)| {
            let sum: f64 = w.iter().sum();
            let v = w.iter().map(|x| x / sum).collect();
            let mut h = vec![0.0];
            for s in &steps[1..] {
                h.push(h.last().unwrap() + s);
            }
            RoughnessProfile::new(v, h).unwrap()
        })
}

#[test]
fn flat_profiles_leave_the_force_unchanged() {
    let flat = RoughnessProfile::flat();
    let f = power_law(3);
    for a in [60.0, 100.0, 300.0] {
        assert_eq!(rough_force(&f, &flat, &flat, a).unwrap(), f(a).unwrap());
        assert_eq!(roughness_correction(&f, &flat, &flat, a).unwrap(), 0.0);
    }
}

#[test]
fn symmetric_two_bin_profiles_match_the_double_sum() {
    let p = RoughnessProfile::new(vec![0.5, 0.5], vec![0.0, 10.0]).unwrap();
    assert_eq!(zero_roughness_level(&p), 5.0);
    let f = |a: f64| -1e6 / (a * a * a);
    for a in [40.0, 80.0] {
        // H₀ = 5 each, so the local gaps are a + 10, a, a, a − 10.
        let hand = 0.25 * (f(a + 10.0) + 2.0 * f(a) + f(a - 10.0));
        let got = rough_force(power_law(3), &p, &p, a).unwrap();
        assert!((got - hand).abs() <= 1e-12 * hand.abs());
        assert!(roughness_correction(power_law(3), &p, &p, a).unwrap() < 0.0);
    }
}

#[test]
fn touching_roughness_is_an_error() {
    let p = RoughnessProfile::new(vec![0.5, 0.5], vec![0.0, 10.0]).unwrap();
    assert!(rough_force(power_law(3), &p, &p, 10.0).is_err());
}

#[test]
fn shipped_profiles_have_the_quoted_shapes() {
    let ito = roughness_ito().unwrap();
    let au = roughness_au().unwrap();
    assert_eq!((ito.len(), au.len()), (18, 25));
    assert!((zero_roughness_level(&ito) - 9.54).abs() < 0.01);
    assert!((zero_roughness_level(&au) - 11.51).abs() < 0.01);
    for p in [&ito, &au] {
        assert_eq!(p.heights()[0], 0.0);
        assert!((p.fractions().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn lifshitz_force_roughness_correction_figures_of_merit() {
    let ito = roughness_ito().unwrap();
    let au = roughness_au().unwrap();
    let a_min = min_effective_separation(&ito, &au, 60.0);
    let grid = matsubara_xi_grid(TEMPERATURE_K, 0.9 * a_min).unwrap();
    let core = ItoCore::compute(Film::Untreated, &Film::Untreated.table().unwrap(), &grid).unwrap();
    let (lower, _) = core.stacks(true, Prescription::Drude).unwrap();
    let table = SmoothForceTable::tabulate(0.99 * a_min, 250.0, 1.02, |a| {
        pfa_sphere_plate_force(
            &lower.with_gap(a),
            SPHERE_RADIUS_UM,
            &MatsubaraSpec::default(),
            &QuadratureSpec::default(),
        )
    })
    .unwrap();
    let corr = |a: f64| {
        roughness_correction(|x| table.eval(x), &ito, &au, a)
            .unwrap()
            .abs()
    };
    let at60 = corr(60.0);
    assert!((0.015..=0.030).contains(&at60), "{at60}");
    for a in [90.0, 100.0, 115.0] {
        assert!(corr(a) < 0.01);
    }
    for a in [116.0, 130.0, 150.0] {
        assert!(corr(a) < 0.005);
    }
}

#[test]
fn table_interpolation_is_accurate() {
    let exact = |a: f64| -1e6 / a.powf(3.3) * (1.0 + 30.0 / a);
    let table = SmoothForceTable::tabulate(20.0, 300.0, 1.02, |a| Ok(exact(a))).unwrap();
    for i in 0..200 {
        let a = 20.0 + 280.0 * i as f64 / 199.0;
        assert!((table.eval(a).unwrap() / exact(a) - 1.0).abs() < 1e-4);
    }
    assert!(table.eval(10.0).is_err());
}

proptest! {
    #[test]
    fn averaging_equals_the_brute_force_sum(
        p1 in profile(18),
        p2 in profile(25),
        a in 40.0f64..200.0,
        n in 1i32..5,
    ) {
        let f = |x: f64| -1e6 / x.powi(n);
        let got = rough_force(power_law(n), &p1, &p2, a).unwrap();
        let want = brute_force(&f, &p1, &p2, a);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs(), "{got} vs {want}");
    }

    #[test]
    fn correction_shrinks_with_distance(p1 in profile(6), p2 in profile(9), n in 1i32..5) {
        let mut prev = f64::INFINITY;
        for a in [40.0, 60.0, 90.0, 140.0, 220.0] {
            let c = roughness_correction(power_law(n), &p1, &p2, a).unwrap();
            // Convex attraction: roughness always strengthens it.
            prop_assert!(c <= 0.0);
            prop_assert!(c.abs() < prev);
            prev = c.abs();
        }
    }

    #[test]
    fn deltas_at_the_zero_level_reproduce_the_smooth_force(a in 30.0f64..300.0) {
        let delta = RoughnessProfile::new(vec![1.0], vec![0.0]).unwrap();
        let f = power_law(3);
        prop_assert_eq!(rough_force(&f, &delta, &delta, a).unwrap(), f(a).unwrap());
    }
}
