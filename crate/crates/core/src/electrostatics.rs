//! Electrostatic force between a conducting sphere and a conducting plate.
//!
//! The exact force follows from the image-charge series
//!
//! ```text
//! F = 2πε₀ ΔV² Σ_{n≥1} (coth α − n coth nα) / sinh nα,   cosh α = 1 + a/R
//! ```
//!
//! For analysis it is replaced by a fitted polynomial
//! X(a) = −2πε₀ Σ_{i=−1}^{6} cᵢ (a/R)^i, certified against the series over
//! its range of validity.

use nalgebra::{DMatrix, DVector};

use crate::calibration::CalibrationParams;
use crate::error::{Error, Result};
use crate::units::{NM, PN, UM, VACUUM_PERMITTIVITY};

/// Relative accuracy to which the series is summed.
const SERIES_REL_TOL: f64 = 1e-8;
const SERIES_MAX_TERMS: usize = 10_000_000;

/// The dimensionless series Σ (coth α − n coth nα)/sinh nα for x = a/R.
pub fn image_charge_sum(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::invalid(format!("a/R must be positive, got {x}")));
    }
    let alpha = (1.0 + x).acosh();
    let coth = |v: f64| 1.0 / v.tanh();
    let coth_a = coth(alpha);
    let mut sum = 0.0;
    for n in 1..=SERIES_MAX_TERMS {
        let na = n as f64 * alpha;
        if na > 700.0 {
            return Ok(sum);
        }
        let term = (coth_a - n as f64 * coth(na)) / na.sinh();
        sum += term;
        // Terms grow before they decay; only test once past the peak.
        if na > 2.0 && term.abs() < 1e-2 * SERIES_REL_TOL * sum.abs() {
            return Ok(sum);
        }
    }
    Err(Error::NonConvergence {
        what: "image-charge series",
        iterations: SERIES_MAX_TERMS,
        estimate: sum,
        error: f64::NAN,
    })
}

/// Exact sphere-plate electrostatic force in pN (attractive, negative).
pub fn exact_sphere_plane_force(a_nm: f64, radius_um: f64, dv_mv: f64) -> Result<f64> {
    if !(a_nm > 0.0) || !(radius_um > 0.0) {
        return Err(Error::invalid(format!(
            "separation and radius must be positive, got a = {a_nm} nm, R = {radius_um} µm"
        )));
    }
    if dv_mv == 0.0 {
        return Ok(0.0);
    }
    let s = image_charge_sum(a_nm * NM / (radius_um * UM))?;
    let dv = dv_mv * 1e-3;
    Ok(2.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY * dv * dv * s / PN)
}

/// X(a) = −2πε₀ Σ cᵢ (a/R)^i, stored with its validity range.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialX {
    /// c₋₁ … c₆.
    pub coeffs: [f64; 8],
    pub radius_um: f64,
    pub a_min_nm: f64,
    pub a_max_nm: f64,
    /// Maximum relative deviation from the series found during certification.
    pub max_rel_error: f64,
}

/// Largest relative deviation accepted by [`fit_polynomial_x`].
pub const CERTIFICATION_LIMIT: f64 = 1e-4;

impl PolynomialX {
    fn sum(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for c in self.coeffs[1..].iter().rev() {
            acc = acc * x + c;
        }
        acc + self.coeffs[0] / x
    }

    fn sum_derivative(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for (i, c) in self.coeffs.iter().enumerate().skip(2).rev() {
            acc = acc * x + (i as f64 - 1.0) * c;
        }
        acc - self.coeffs[0] / (x * x)
    }

    pub fn contains(&self, a_nm: f64) -> bool {
        a_nm >= self.a_min_nm && a_nm <= self.a_max_nm
    }

    fn check(&self, a_nm: f64) -> Result<()> {
        if self.contains(a_nm) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "separation {a_nm} nm is outside the electrostatic fit range [{}, {}] nm",
                self.a_min_nm, self.a_max_nm
            )))
        }
    }

    /// X(a) in pN/mV².
    pub fn eval(&self, a_nm: f64) -> Result<f64> {
        self.check(a_nm)?;
        Ok(self.eval_unchecked(a_nm))
    }

    /// X(a) in pN/mV² without the range check, for fits whose trial
    /// separations can stray slightly outside the fitted range.
    pub fn eval_unchecked(&self, a_nm: f64) -> f64 {
        let x = a_nm * NM / (self.radius_um * UM);
        -2.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY * self.sum(x) * 1e-6 / PN
    }

    /// dX/da in pN/(mV²·nm).
    pub fn derivative(&self, a_nm: f64) -> Result<f64> {
        self.check(a_nm)?;
        Ok(self.derivative_unchecked(a_nm))
    }

    pub fn derivative_unchecked(&self, a_nm: f64) -> f64 {
        let r_nm = self.radius_um * 1e3;
        let x = a_nm / r_nm;
        -2.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY * self.sum_derivative(x) / r_nm * 1e-6
            / PN
    }

    /// d²X/da² in pN/(mV²·nm²), without the range check.
    pub fn second_derivative_unchecked(&self, a_nm: f64) -> f64 {
        let r_nm = self.radius_um * 1e3;
        let x = a_nm / r_nm;
        let mut acc = 0.0;
        for (i, c) in self.coeffs.iter().enumerate().skip(3).rev() {
            let p = i as f64 - 1.0;
            acc = acc * x + p * (p - 1.0) * c;
        }
        let sum = acc + 2.0 * self.coeffs[0] / (x * x * x);
        -2.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY * sum / (r_nm * r_nm) * 1e-6 / PN
    }
}

/// Fits the polynomial to the exact series on a logarithmic grid over
/// `a_range_nm` and certifies it on a denser grid.
pub fn fit_polynomial_x(radius_um: f64, a_range_nm: (f64, f64)) -> Result<PolynomialX> {
    let (lo, hi) = a_range_nm;
    if !(radius_um > 0.0) || !(lo > 0.0 && hi > lo) {
        return Err(Error::invalid(format!(
            "invalid electrostatic fit: R = {radius_um} µm, range [{lo}, {hi}] nm"
        )));
    }
    let r_nm = radius_um * 1e3;
    let grid = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
            .collect()
    };
    let fit_a = grid(400);
    let targets = fit_a
        .iter()
        .map(|a| image_charge_sum(a / r_nm).map(|s| -s))
        .collect::<Result<Vec<_>>>()?;

    // Relative weighting and column scaling keep the normal problem well
    // conditioned across the decades spanned by x^{-1} … x^6.
    let mut design = DMatrix::<f64>::zeros(fit_a.len(), 8);
    let mut rhs = DVector::<f64>::zeros(fit_a.len());
    for (row, (a, t)) in fit_a.iter().zip(&targets).enumerate() {
        let x = a / r_nm;
        let w = 1.0 / t.abs();
        for col in 0..8 {
            design[(row, col)] = w * x.powi(col as i32 - 1);
        }
        rhs[row] = w * t;
    }
    let scales: Vec<f64> = (0..8).map(|c| design.column(c).norm()).collect();
    for (c, s) in scales.iter().enumerate() {
        design.column_mut(c).scale_mut(1.0 / s);
    }
    let solution = design
        .svd(true, true)
        .solve(&rhs, 1e-15)
        .map_err(|e| Error::invalid(format!("electrostatic least squares failed: {e}")))?;
    let mut coeffs = [0.0; 8];
    for (c, v) in coeffs.iter_mut().enumerate() {
        *v = solution[c] / scales[c];
    }
    let mut poly = PolynomialX {
        coeffs,
        radius_um,
        a_min_nm: lo,
        a_max_nm: hi,
        max_rel_error: 0.0,
    };
    let mut worst: f64 = 0.0;
    for a in grid(2000) {
        let exact = -image_charge_sum(a / r_nm)?;
        worst = worst.max((poly.sum(a / r_nm) / exact - 1.0).abs());
    }
    poly.max_rel_error = worst;
    if worst >= CERTIFICATION_LIMIT {
        return Err(Error::Certification {
            max_rel_error: worst,
            limit: CERTIFICATION_LIMIT,
        });
    }
    Ok(poly)
}

/// X(a)(V − V₀)² in pN.
pub fn electrostatic_force(
    a_nm: f64,
    v_mv: f64,
    calib: &CalibrationParams,
    x: &PolynomialX,
) -> Result<f64> {
    let dv = v_mv - calib.v0_mv;
    Ok(x.eval(a_nm)? * dv * dv)
}
