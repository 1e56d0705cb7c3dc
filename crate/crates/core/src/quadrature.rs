//! Globally adaptive Gauss–Kronrod (21-point) integration.
//!
//! The interval with the largest error estimate is bisected until the summed
//! error meets the tolerance. Error estimates use the QUADPACK rescaling of
//! the Gauss/Kronrod difference. Semi-infinite ranges are mapped onto a finite
//! one with u = 1/x.

#![allow(clippy::excessive_precision)]

use crate::error::{Error, Result};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

// Gauss weights for the odd-indexed Kronrod nodes (XGK[1], XGK[3], ...).
const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_958_109_831_074,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

/// Error control for adaptive integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    /// Target relative error of the integral.
    pub rel_tol: f64,
    /// Absolute error floor, used when the integral is close to zero.
    pub abs_tol: f64,
    /// Maximum bisection depth of any subinterval.
    pub max_level: u32,
    /// Maximum number of subintervals kept at once.
    pub max_intervals: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            rel_tol: 1e-6,
            abs_tol: 0.0,
            max_level: 20,
            max_intervals: 2000,
        }
    }
}

impl QuadratureSpec {
    pub fn with_rel_tol(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) || self.abs_tol < 0.0 {
            return Err(Error::invalid(format!(
                "quadrature tolerances must satisfy 0 < rel_tol < 1 and abs_tol >= 0 (got {}, {})",
                self.rel_tol, self.abs_tol
            )));
        }
        Ok(())
    }
}

/// Integral value with its error estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    level: u32,
}

fn rescale_error(err: f64, res_abs: f64, res_asc: f64) -> f64 {
    let mut scaled = err.abs();
    if res_asc != 0.0 && scaled != 0.0 {
        let scale = (200.0 * scaled / res_asc).powf(1.5);
        scaled = if scale < 1.0 {
            res_asc * scale
        } else {
            res_asc
        };
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        scaled = scaled.max(50.0 * f64::EPSILON * res_abs);
    }
    scaled
}

/// One 21-point Kronrod rule on [a, b]: (value, error).
pub fn gauss_kronrod_21<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let f_center = f(center);
    let mut res_k = f_center * WGK[10];
    let mut res_g = 0.0;
    let mut res_abs = res_k.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let x = half * XGK[j];
        let f1 = f(center - x);
        let f2 = f(center + x);
        fv1[j] = f1;
        fv2[j] = f2;
        res_k += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_g += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * res_k;
    let mut res_asc = WGK[10] * (f_center - mean).abs();
    for j in 0..10 {
        res_asc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let value = res_k * half;
    let err = rescale_error(
        (res_k - res_g) * half,
        res_abs * half.abs(),
        res_asc * half.abs(),
    );
    (value, err)
}

/// Integrates `f` over the finite interval [a, b].
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    spec: &QuadratureSpec,
) -> Result<Estimate> {
    spec.validate()?;
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::invalid(format!(
            "integration limits must be finite, got [{a}, {b}]"
        )));
    }
    if a == b {
        return Ok(Estimate {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
        });
    }
    let (value, error) = gauss_kronrod_21(&mut f, a, b);
    let mut panels = vec![Panel {
        a,
        b,
        value,
        error,
        level: 0,
    }];
    let mut evaluations = 21;
    loop {
        let total: f64 = panels.iter().map(|p| p.value).sum();
        let total_err: f64 = panels.iter().map(|p| p.error).sum();
        let target = spec.abs_tol.max(spec.rel_tol * total.abs());
        if total_err <= target {
            return Ok(Estimate {
                value: total,
                error: total_err,
                evaluations,
            });
        }
        let (worst, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .expect("at least one panel");
        let p = panels[worst];
        if p.level >= spec.max_level || panels.len() >= spec.max_intervals || !total.is_finite() {
            return Err(Error::NonConvergence {
                what: "adaptive quadrature",
                iterations: panels.len(),
                estimate: total,
                error: total_err,
            });
        }
        let mid = 0.5 * (p.a + p.b);
        let (v1, e1) = gauss_kronrod_21(&mut f, p.a, mid);
        let (v2, e2) = gauss_kronrod_21(&mut f, mid, p.b);
        evaluations += 42;
        panels[worst] = Panel {
            a: p.a,
            b: mid,
            value: v1,
            error: e1,
            level: p.level + 1,
        };
        panels.push(Panel {
            a: mid,
            b: p.b,
            value: v2,
            error: e2,
            level: p.level + 1,
        });
    }
}

/// Integrates `f` over [a, ∞) with a > 0 through the substitution u = 1/x.
///
/// `f` must decay faster than 1/x for the transformed integrand
/// f(1/u)/u² to stay bounded at u → 0.
pub fn integrate_to_infinity<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    spec: &QuadratureSpec,
) -> Result<Estimate> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::invalid(format!(
            "semi-infinite integration needs a finite positive lower limit, got {a}"
        )));
    }
    integrate(
        |u| {
            if u <= 0.0 {
                0.0
            } else {
                let x = 1.0 / u;
                f(x) * x * x
            }
        },
        0.0,
        1.0 / a,
        spec,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn polynomial_is_exact() {
        let est = integrate(
            |x| x.powi(5) - 3.0 * x * x,
            0.0,
            2.0,
            &QuadratureSpec::default(),
        )
        .unwrap();
        assert!((est.value - (64.0 / 6.0 - 8.0)).abs() < 1e-13);
    }

    #[test]
    fn log_endpoint_singularity_converges() {
        // ∫_0^1 x ln x dx = -1/4
        let spec = QuadratureSpec::with_rel_tol(1e-10);
        let est = integrate(|x| if x > 0.0 { x * x.ln() } else { 0.0 }, 0.0, 1.0, &spec).unwrap();
        assert!((est.value + 0.25).abs() < 1e-10);
    }

    #[test]
    fn lorentzian_to_infinity() {
        // ∫_1^∞ dx/(1+x²) = π/4
        let est = integrate_to_infinity(
            |x| 1.0 / (1.0 + x * x),
            1.0,
            &QuadratureSpec::with_rel_tol(1e-10),
        )
        .unwrap();
        assert!((est.value - PI / 4.0).abs() < 1e-10);
    }

    #[test]
    fn impossible_tolerance_reports_non_convergence() {
        let spec = QuadratureSpec {
            rel_tol: 1e-15,
            max_level: 3,
            ..QuadratureSpec::default()
        };
        let res = integrate(|x| (1.0 / x).sin(), 1e-6, 1.0, &spec);
        assert!(matches!(res, Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn zero_integrand_is_accepted() {
        let est = integrate(|_| 0.0, 0.0, 5.0, &QuadratureSpec::default()).unwrap();
        assert_eq!(est.value, 0.0);
    }
}
