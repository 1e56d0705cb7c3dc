//! ε(iξ) from tabulated optical data.
//!
//! The Kramers–Kronig relation on the imaginary axis reads
//!
//! ```text
//! ε(iξ) = 1 + (2/π) ∫₀^∞ ω Im ε(ω) / (ω² + ξ²) dω
//! ```
//!
//! The integral is split into three ranges: below the table (a low-frequency
//! extrapolation, normally Drude), the tabulated range (log-log interpolation
//! between rows) and above the table (an oscillator extrapolation, integrated
//! through u = 1/ω).
//!
//! Free charge carriers are handled by decomposition: the carrier-free core is
//! the transform of the table with the Drude absorption subtracted and no
//! low-frequency tail, and the carriers-on permittivity adds the analytic
//! Drude term ω_p²/(ξ(ξ + γ)) back on top.

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::interp::{check_strictly_increasing, segment_index};
use crate::lifshitz::matsubara_frequency;
use crate::material::{drude_eps_imag_axis, Absorption, DrudeParams};
use crate::quadrature::{integrate, integrate_to_infinity, QuadratureSpec};

/// Default relative tolerance of each partial integral.
pub const KK_REL_TOL: f64 = 1e-8;

/// Im ε(ω) rows, ω strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct OpticalDataTable {
    omega: Vec<f64>,
    im_eps: Vec<f64>,
}

impl OpticalDataTable {
    pub fn new(omega: Vec<f64>, im_eps: Vec<f64>) -> Result<Self> {
        if omega.len() != im_eps.len() {
            return Err(Error::data(format!(
                "optical table columns differ in length ({} vs {})",
                omega.len(),
                im_eps.len()
            )));
        }
        if omega.len() < 2 {
            return Err(Error::data(format!(
                "optical table needs at least 2 rows, got {}",
                omega.len()
            )));
        }
        check_strictly_increasing(&omega, "optical table frequencies")?;
        if omega[0] <= 0.0 {
            return Err(Error::data(format!(
                "optical table frequencies must be positive, got {}",
                omega[0]
            )));
        }
        if let Some(v) = im_eps.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::data(format!(
                "Im eps must be finite and non-negative, got {v}"
            )));
        }
        Ok(Self { omega, im_eps })
    }

    /// Samples `f` on `omega`.
    pub fn from_fn(omega: Vec<f64>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let im_eps = omega.iter().map(|&w| f(w)).collect();
        Self::new(omega, im_eps)
    }

    /// Reads `omega_ev,im_eps` CSV (header required, `#` comments).
    pub fn from_reader<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::csv(origin, e))?.clone();
        let expected = ["omega_ev", "im_eps"];
        if headers.len() != 2 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::data(format!(
                "{origin}: expected header `omega_ev,im_eps`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut omega = Vec::new();
        let mut im_eps = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(origin, e))?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::data(format!(
                            "{origin}: row {} column {} is not a number",
                            i + 1,
                            k + 1
                        ))
                    })
            };
            omega.push(parse(0)?);
            im_eps.push(parse(1)?);
        }
        Self::new(omega, im_eps).map_err(|e| Error::data(format!("{origin}: {e}")))
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, &path.display().to_string())
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn im_eps_values(&self) -> &[f64] {
        &self.im_eps
    }

    pub fn omega_min(&self) -> f64 {
        self.omega[0]
    }

    pub fn omega_max(&self) -> f64 {
        self.omega[self.omega.len() - 1]
    }

    /// Interpolated Im ε(ω) inside the table range. Power law between rows,
    /// linear where a row is zero.
    pub fn im_eps(&self, omega: f64) -> Option<f64> {
        if omega < self.omega_min() || omega > self.omega_max() {
            return None;
        }
        let i = segment_index(&self.omega, omega);
        Some(self.segment_value(i, omega))
    }

    fn segment_value(&self, i: usize, omega: f64) -> f64 {
        let (w0, w1) = (self.omega[i], self.omega[i + 1]);
        let (y0, y1) = (self.im_eps[i], self.im_eps[i + 1]);
        if y0 > 0.0 && y1 > 0.0 {
            let p = (y1 / y0).ln() / (w1 / w0).ln();
            y0 * (omega / w0).powf(p)
        } else {
            y0 + (y1 - y0) * (omega - w0) / (w1 - w0)
        }
    }
}

/// Extrapolations of Im ε below and above the tabulated range.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationSpec {
    pub low: Absorption,
    pub high: Absorption,
}

impl ExtrapolationSpec {
    pub fn validate(&self) -> Result<()> {
        self.low.validate()?;
        self.high.validate()
    }

    fn carrier_drude(&self) -> Result<DrudeParams> {
        match &self.low {
            Absorption::Drude(p) => Ok(*p),
            other => Err(Error::invalid(format!(
                "the free-carrier decomposition needs a Drude low-frequency extrapolation, got {other:?}"
            ))),
        }
    }
}

fn kernel(omega: f64, im: f64, xi: f64) -> f64 {
    omega * im / (omega * omega + xi * xi)
}

/// (2/π) ∫ over the three ranges, with `table_im` giving Im ε on the table
/// range and `low` optionally supplying the tail below it.
fn kk_sum(
    table: &OpticalDataTable,
    table_im: &(dyn Fn(usize, f64) -> f64 + Sync),
    low: Option<&Absorption>,
    high: &Absorption,
    xi: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    if !(xi > 0.0) || !xi.is_finite() {
        return Err(Error::Domain {
            model: "Kramers-Kronig transform",
            value: xi,
            reason: "requires finite xi > 0",
        });
    }
    let w_min = table.omega_min();
    let w_max = table.omega_max();

    let mut total = 0.0;
    if let Some(low) = low {
        if !matches!(low, Absorption::None) {
            let mut err = None;
            let est = integrate(
                |w| {
                    if w <= 0.0 {
                        return 0.0;
                    }
                    match low.im_eps(w) {
                        Ok(v) => kernel(w, v, xi),
                        Err(e) => {
                            err.get_or_insert(e);
                            0.0
                        }
                    }
                },
                0.0,
                w_min,
                spec,
            )?;
            if let Some(e) = err {
                return Err(e);
            }
            total += est.value;
        }
    }

    for i in 0..table.omega.len() - 1 {
        let est = integrate(
            |w| kernel(w, table_im(i, w), xi),
            table.omega[i],
            table.omega[i + 1],
            spec,
        )?;
        total += est.value;
    }

    if !matches!(high, Absorption::None) {
        let mut err = None;
        let est = integrate_to_infinity(
            |w| match high.im_eps(w) {
                Ok(v) => kernel(w, v, xi),
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            },
            w_max,
            spec,
        )?;
        if let Some(e) = err {
            return Err(e);
        }
        total += est.value;
    }
    Ok(2.0 / std::f64::consts::PI * total)
}

/// ε(iξ) from the full table plus both extrapolations.
pub fn kk_transform(table: &OpticalDataTable, ext: &ExtrapolationSpec, xi: f64) -> Result<f64> {
    kk_transform_with(table, ext, xi, &QuadratureSpec::with_rel_tol(KK_REL_TOL))
}

pub fn kk_transform_with(
    table: &OpticalDataTable,
    ext: &ExtrapolationSpec,
    xi: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    ext.validate()?;
    let im = |i: usize, w: f64| table.segment_value(i, w);
    Ok(1.0 + kk_sum(table, &im, Some(&ext.low), &ext.high, xi, spec)?)
}

/// Carrier-free ε(iξ): the table with the Drude absorption of `ext.low`
/// subtracted (clamped at zero), no low-frequency tail, and `ext.high` above.
pub fn kk_core(
    table: &OpticalDataTable,
    ext: &ExtrapolationSpec,
    xi: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    ext.validate()?;
    let drude = ext.carrier_drude()?;
    let im = |i: usize, w: f64| {
        let carriers =
            drude.omega_p * drude.omega_p * drude.gamma / (w * (w * w + drude.gamma * drude.gamma));
        (table.segment_value(i, w) - carriers).max(0.0)
    };
    Ok(1.0 + kk_sum(table, &im, None, &ext.high, xi, spec)?)
}

/// Free-carrier contribution switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Carriers {
    On,
    Off,
}

impl Carriers {
    pub fn label(self) -> &'static str {
        match self {
            Carriers::On => "carriers_on",
            Carriers::Off => "carriers_off",
        }
    }
}

/// ε(iξ) sampled on an ascending ξ grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PermittivityCurve {
    pub label: String,
    xi: Vec<f64>,
    eps: Vec<f64>,
}

impl PermittivityCurve {
    pub fn new(label: impl Into<String>, xi: Vec<f64>, eps: Vec<f64>) -> Result<Self> {
        if xi.len() != eps.len() || xi.len() < 2 {
            return Err(Error::data(format!(
                "permittivity curve needs at least 2 points and equal lengths (got {} and {})",
                xi.len(),
                eps.len()
            )));
        }
        check_strictly_increasing(&xi, "permittivity curve grid")?;
        if xi[0] <= 0.0 {
            return Err(Error::data("permittivity curve grid must be positive"));
        }
        if let Some(e) = eps.iter().find(|e| !(**e >= 1.0) || !e.is_finite()) {
            return Err(Error::data(format!(
                "permittivity curve value {e} is below 1"
            )));
        }
        Ok(Self {
            label: label.into(),
            xi,
            eps,
        })
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn covers(&self, xi: f64) -> bool {
        xi >= self.xi[0] && xi <= self.xi[self.xi.len() - 1]
    }

    /// ε(iξ): log-log interpolation of ε − 1 inside the grid, the first value
    /// below it and a ξ⁻² decay of ε − 1 above it.
    pub fn eval(&self, xi: f64) -> f64 {
        let n = self.xi.len();
        if xi <= self.xi[0] {
            return self.eps[0];
        }
        if xi >= self.xi[n - 1] {
            return 1.0 + (self.eps[n - 1] - 1.0) * (self.xi[n - 1] / xi).powi(2);
        }
        let i = segment_index(&self.xi, xi);
        let (x0, x1) = (self.xi[i], self.xi[i + 1]);
        let (s0, s1) = (self.eps[i] - 1.0, self.eps[i + 1] - 1.0);
        if xi == x0 {
            return self.eps[i];
        }
        if s0 > 0.0 && s1 > 0.0 {
            let p = (s1 / s0).ln() / (x1 / x0).ln();
            1.0 + s0 * (xi / x0).powf(p)
        } else {
            1.0 + s0 + (s1 - s0) * (xi - x0) / (x1 - x0)
        }
    }

    /// ε at the lowest grid point, used as the static permittivity.
    pub fn static_value(&self) -> f64 {
        self.eps[0]
    }
}

/// Carrier-free ε(iξ) on `xi_grid`, evaluated in parallel.
pub fn core_curve(
    table: &OpticalDataTable,
    ext: &ExtrapolationSpec,
    xi_grid: &[f64],
    label: impl Into<String>,
    spec: &QuadratureSpec,
) -> Result<PermittivityCurve> {
    check_strictly_increasing(xi_grid, "xi grid")?;
    let eps = xi_grid
        .par_iter()
        .map(|&xi| kk_core(table, ext, xi, spec))
        .collect::<Result<Vec<_>>>()?;
    PermittivityCurve::new(label, xi_grid.to_vec(), eps)
}

/// The (lower, upper) extrapolation band of ε(iξ) with free carriers on or off.
pub fn build_curve(
    table: &OpticalDataTable,
    ext_lower: &ExtrapolationSpec,
    ext_upper: &ExtrapolationSpec,
    xi_grid: &[f64],
    carriers: Carriers,
) -> Result<(PermittivityCurve, PermittivityCurve)> {
    let spec = QuadratureSpec::with_rel_tol(KK_REL_TOL);
    let mut out = Vec::with_capacity(2);
    for (ext, band) in [(ext_lower, "lower"), (ext_upper, "upper")] {
        let core = core_curve(
            table,
            ext,
            xi_grid,
            format!("{}_{band}", carriers.label()),
            &spec,
        )?;
        let curve = match carriers {
            Carriers::Off => core,
            Carriers::On => {
                let drude = ext.carrier_drude()?;
                let eps = xi_grid
                    .iter()
                    .zip(core.eps())
                    .map(|(&xi, &e)| Ok(e + drude_eps_imag_axis(&drude, xi)? - 1.0))
                    .collect::<Result<Vec<_>>>()?;
                PermittivityCurve::new(core.label.clone(), xi_grid.to_vec(), eps)?
            }
        };
        out.push(curve);
    }
    let upper = out.pop().expect("two bands");
    let lower = out.pop().expect("two bands");
    Ok((lower, upper))
}

/// ε_on(iξ₁)/ε_off(iξ₁) at the first Matsubara frequency of temperature `t_k`.
pub fn first_matsubara_ratio(
    curve_on: &PermittivityCurve,
    curve_off: &PermittivityCurve,
    t_k: f64,
) -> Result<f64> {
    let xi1 = matsubara_frequency(1, t_k)?;
    for c in [curve_on, curve_off] {
        if !c.covers(xi1) {
            return Err(Error::invalid(format!(
                "curve `{}` spans [{}, {}] eV and does not cover the first Matsubara frequency {xi1:.4} eV",
                c.label,
                c.xi[0],
                c.xi[c.xi.len() - 1]
            )));
        }
    }
    Ok(curve_on.eval(xi1) / curve_off.eval(xi1))
}

/// Writes curves sharing one grid as `xi_ev,<label>...`.
pub fn write_curves_csv<W: std::io::Write>(writer: W, curves: &[&PermittivityCurve]) -> Result<()> {
    let first = curves
        .first()
        .ok_or_else(|| Error::invalid("no permittivity curves to write"))?;
    if curves.iter().any(|c| c.xi != first.xi) {
        return Err(Error::invalid(
            "permittivity curves must share one grid to be written together",
        ));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["xi_ev".to_string()];
    header.extend(curves.iter().map(|c| format!("eps_{}", c.label)));
    w.write_record(&header)
        .map_err(|e| Error::csv("permittivity output", e))?;
    for (i, xi) in first.xi.iter().enumerate() {
        let mut row = vec![format!("{xi:.10e}")];
        row.extend(curves.iter().map(|c| format!("{:.10e}", c.eps[i])));
        w.write_record(&row)
            .map_err(|e| Error::csv("permittivity output", e))?;
    }
    w.flush().map_err(|e| Error::io("permittivity output", e))?;
    Ok(())
}

/// Reads a CSV written by [`write_curves_csv`].
pub fn read_curves_csv<R: Read>(reader: R, origin: &str) -> Result<Vec<PermittivityCurve>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::csv(origin, e))?.clone();
    if headers.get(0) != Some("xi_ev") || headers.len() < 2 {
        return Err(Error::data(format!(
            "{origin}: expected `xi_ev,eps_<label>...` header"
        )));
    }
    let labels: Vec<String> = headers
        .iter()
        .skip(1)
        .map(|h| h.strip_prefix("eps_").unwrap_or(h).to_string())
        .collect();
    let mut xi = Vec::new();
    let mut cols = vec![Vec::new(); labels.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(origin, e))?;
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::data(format!("{origin}: {e}")))?;
        xi.push(vals[0]);
        for (c, v) in cols.iter_mut().zip(&vals[1..]) {
            c.push(*v);
        }
    }
    labels
        .into_iter()
        .zip(cols)
        .map(|(l, c)| PermittivityCurve::new(l, xi.clone(), c))
        .collect()
}
