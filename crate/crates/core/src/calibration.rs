//! From raw force-distance curves to calibrated Casimir forces.
//!
//! The cantilever deflection signal S_def of a curve recorded at voltage V
//! obeys
//!
//! ```text
//! k̃ S_def = F_cas(a) + X(a)(V − V₀)²,    a = z₀ + z_piezo + m S_def
//! ```
//!
//! Calibration finds (V₀, m, z₀, k̃) from curves at several voltages. The
//! unknown Casimir force is represented by a cubic B-spline in a whose
//! coefficients are eliminated by linear least squares (variable projection),
//! leaving a small Levenberg–Marquardt problem in (m, z₀, V₀, 1/k̃) and an
//! optional per-curve drift of z₀. Parabola fits of S_def against V at each
//! separation then provide the separation-resolved V₀ and k̃ used for the
//! residual-potential trend test.

use std::cell::RefCell;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::electrostatics::PolynomialX;
use crate::error::{Error, Result};
use crate::interp::check_strictly_increasing;
use crate::stats::{
    fit_parabola, mean, mean_half_width_95, sample_sd, t_quantile_95, weighted_line_fit,
};

/// Calibration constants with their 95% half-widths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationParams {
    /// Residual potential V₀ in mV.
    pub v0_mv: f64,
    pub v0_hw_mv: f64,
    /// Deflection coefficient m in nm/V.
    pub m_nm_per_v: f64,
    pub m_hw_nm_per_v: f64,
    /// Separation on contact z₀ in nm.
    pub z0_nm: f64,
    pub z0_hw_nm: f64,
    /// Force per unit deflection signal k̃ = k·m in nN/V.
    pub k_tilde_nn_per_v: f64,
    pub k_tilde_hw_nn_per_v: f64,
    /// Linear change of z₀ per curve in acquisition order, nm.
    pub drift_nm_per_curve: f64,
    pub drift_hw_nm_per_curve: f64,
}

impl CalibrationParams {
    /// Exactly known parameters (zero half-widths, no drift).
    pub fn exact(v0_mv: f64, m_nm_per_v: f64, z0_nm: f64, k_tilde_nn_per_v: f64) -> Self {
        Self {
            v0_mv,
            v0_hw_mv: 0.0,
            m_nm_per_v,
            m_hw_nm_per_v: 0.0,
            z0_nm,
            z0_hw_nm: 0.0,
            k_tilde_nn_per_v,
            k_tilde_hw_nn_per_v: 0.0,
            drift_nm_per_curve: 0.0,
            drift_hw_nm_per_curve: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m_nm_per_v),
            ("z0", self.z0_nm),
            ("k_tilde", self.k_tilde_nn_per_v),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "calibration {name} must be positive, got {v}"
                )));
            }
        }
        let hws = [
            self.v0_hw_mv,
            self.m_hw_nm_per_v,
            self.z0_hw_nm,
            self.k_tilde_hw_nn_per_v,
            self.drift_hw_nm_per_curve,
        ];
        if hws.iter().any(|h| !(*h >= 0.0))
            || !self.v0_mv.is_finite()
            || !self.drift_nm_per_curve.is_finite()
        {
            return Err(Error::invalid(
                "calibration half-widths must be non-negative and values finite",
            ));
        }
        Ok(())
    }

    pub fn k_tilde_pn_per_v(&self) -> f64 {
        self.k_tilde_nn_per_v * 1e3
    }

    /// z₀ for the curve at position `sequence` in acquisition order.
    pub fn z0_for(&self, sequence: Option<u32>) -> f64 {
        self.z0_nm + self.drift_nm_per_curve * f64::from(sequence.unwrap_or(0))
    }
}

/// a = z₀ + z_piezo + m·S_def.
pub fn reconstruct_separation(z_piezo_nm: f64, s_def_v: f64, calib: &CalibrationParams) -> f64 {
    calib.z0_nm + z_piezo_nm + calib.m_nm_per_v * s_def_v
}

/// One recorded approach curve at fixed applied voltage.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceDistanceCurve {
    pub voltage_mv: f64,
    pub repetition: u32,
    /// Position in acquisition order, needed for drift correction.
    pub sequence: Option<u32>,
    pub z_piezo_nm: Vec<f64>,
    pub s_def_v: Vec<f64>,
}

impl ForceDistanceCurve {
    pub fn new(
        voltage_mv: f64,
        repetition: u32,
        sequence: Option<u32>,
        z_piezo_nm: Vec<f64>,
        s_def_v: Vec<f64>,
    ) -> Result<Self> {
        let c = Self {
            voltage_mv,
            repetition,
            sequence,
            z_piezo_nm,
            s_def_v,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.voltage_mv.is_finite() {
            return Err(Error::data("curve voltage must be finite"));
        }
        if self.z_piezo_nm.len() != self.s_def_v.len() || self.z_piezo_nm.len() < 2 {
            return Err(Error::data(format!(
                "curve needs at least 2 rows of matching length (got {} and {})",
                self.z_piezo_nm.len(),
                self.s_def_v.len()
            )));
        }
        check_strictly_increasing(&self.z_piezo_nm, "z_piezo")?;
        if self.s_def_v.iter().any(|s| !s.is_finite()) {
            return Err(Error::data("deflection signal contains non-finite values"));
        }
        Ok(())
    }

    /// Reads the CSV format with `# voltage_mv=`, `# repetition=` and
    /// optional `# sequence=` header lines followed by `z_piezo_nm,s_def_v`.
    pub fn from_reader<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut voltage = None;
        let mut repetition = None;
        let mut sequence = None;
        let mut header_seen = false;
        let mut z = Vec::new();
        let mut s = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((key, value)) = meta.split_once('=') {
                    let value = value.trim();
                    let bad =
                        || Error::data(format!("{origin}: line {}: cannot parse `{line}`", i + 1));
                    match key.trim() {
                        "voltage_mv" => voltage = Some(value.parse::<f64>().map_err(|_| bad())?),
                        "repetition" => repetition = Some(value.parse::<u32>().map_err(|_| bad())?),
                        "sequence" => sequence = Some(value.parse::<u32>().map_err(|_| bad())?),
                        _ => {}
                    }
                }
                continue;
            }
            if !header_seen {
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                if cols != ["z_piezo_nm", "s_def_v"] {
                    return Err(Error::data(format!(
                        "{origin}: expected header `z_piezo_nm,s_def_v`, found `{line}`"
                    )));
                }
                header_seen = true;
                continue;
            }
            let mut parts = line.split(',').map(str::trim);
            let parse = |p: Option<&str>| -> Result<f64> {
                p.and_then(|v| v.parse().ok()).ok_or_else(|| {
                    Error::data(format!("{origin}: line {}: expected two numbers", i + 1))
                })
            };
            z.push(parse(parts.next())?);
            s.push(parse(parts.next())?);
        }
        let voltage = voltage
            .ok_or_else(|| Error::data(format!("{origin}: missing `# voltage_mv=` header")))?;
        let repetition = repetition
            .ok_or_else(|| Error::data(format!("{origin}: missing `# repetition=` header")))?;
        Self::new(voltage, repetition, sequence, z, s)
            .map_err(|e| Error::data(format!("{origin}: {e}")))
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f, &path.display().to_string())
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("curve output", e);
        writeln!(w, "# voltage_mv={}", self.voltage_mv).map_err(io)?;
        writeln!(w, "# repetition={}", self.repetition).map_err(io)?;
        if let Some(seq) = self.sequence {
            writeln!(w, "# sequence={seq}").map_err(io)?;
        }
        writeln!(w, "z_piezo_nm,s_def_v").map_err(io)?;
        for (z, s) in self.z_piezo_nm.iter().zip(&self.s_def_v) {
            writeln!(w, "{z},{s:e}").map_err(io)?;
        }
        Ok(())
    }

    /// Averages the samples in bins of width `step` centred on its multiples.
    pub fn binned(&self, step: f64) -> BinnedCurve {
        let mut out = BinnedCurve {
            z_nm: Vec::new(),
            s_v: Vec::new(),
            z_var_nm2: Vec::new(),
            counts: Vec::new(),
        };
        let z = &self.z_piezo_nm;
        let mut start = 0;
        while start < z.len() {
            let key = (z[start] / step).round();
            let end = (start..z.len())
                .find(|&j| (z[j] / step).round() != key)
                .unwrap_or(z.len());
            let n = (end - start) as f64;
            let zm = z[start..end].iter().sum::<f64>() / n;
            out.z_nm.push(zm);
            out.s_v
                .push(self.s_def_v[start..end].iter().sum::<f64>() / n);
            out.z_var_nm2
                .push(z[start..end].iter().map(|v| (v - zm).powi(2)).sum::<f64>() / n);
            out.counts.push(end - start);
            start = end;
        }
        out
    }
}

/// Bin means of a curve: samples with the same nearest multiple of a step
/// are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedCurve {
    /// Mean piezo position of each bin, nm.
    pub z_nm: Vec<f64>,
    /// Mean deflection of each bin, V.
    pub s_v: Vec<f64>,
    /// Variance of the piezo positions inside each bin, nm². A smooth S(z)
    /// has bin mean S(z̄) + ½S''(z̄)·var to second order.
    pub z_var_nm2: Vec<f64>,
    /// Number of raw samples in each bin; bins follow the raw order.
    pub counts: Vec<usize>,
}

/// Loads every `*.csv` file in `dir` (sorted by name) as a curve.
pub fn load_curve_dir(dir: impl AsRef<Path>) -> Result<Vec<ForceDistanceCurve>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(format!(
            "{}: no curve files (*.csv) found",
            dir.display()
        )));
    }
    let mut curves = Vec::with_capacity(paths.len());
    let mut problems = Vec::new();
    for p in &paths {
        match ForceDistanceCurve::from_csv_path(p) {
            Ok(c) => curves.push(c),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if !problems.is_empty() {
        return Err(Error::data(format!(
            "{} of {} curve files could not be read:\n  {}",
            problems.len(),
            paths.len(),
            problems.join("\n  ")
        )));
    }
    Ok(curves)
}

/// Regular separation grid a_j = start + j·step, j < len.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationGrid {
    pub start_nm: f64,
    pub step_nm: f64,
    pub len: usize,
}

impl SeparationGrid {
    pub fn covering(lo_nm: f64, hi_nm: f64, step_nm: f64) -> Result<Self> {
        if !(step_nm > 0.0) || !(hi_nm > lo_nm) {
            return Err(Error::invalid(format!(
                "invalid separation grid [{lo_nm}, {hi_nm}] nm with step {step_nm} nm"
            )));
        }
        let len = ((hi_nm - lo_nm) / step_nm + 1e-9).floor() as usize + 1;
        Ok(Self {
            start_nm: lo_nm,
            step_nm,
            len,
        })
    }

    pub fn at(&self, j: usize) -> f64 {
        self.start_nm + j as f64 * self.step_nm
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|j| self.at(j)).collect()
    }
}

/// Linear interpolation of `s` against the (possibly non-monotone)
/// separations `a` onto the grid. Where noise makes a(z) cross a grid point
/// several times the crossings are averaged.
pub fn interpolate_to_grid(a: &[f64], s: &[f64], grid: &SeparationGrid) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; grid.len];
    let mut count = vec![0u32; grid.len];
    let last = a.len().saturating_sub(1);
    for k in 0..last {
        let (a0, a1) = (a[k], a[k + 1]);
        if a0 == a1 {
            continue;
        }
        let (lo, hi) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
        let j_lo = ((lo - grid.start_nm) / grid.step_nm).ceil().max(0.0) as usize;
        let j_hi = ((hi - grid.start_nm) / grid.step_nm).floor();
        if j_hi < 0.0 {
            continue;
        }
        let j_hi = (j_hi as usize).min(grid.len.saturating_sub(1));
        for j in j_lo..=j_hi {
            let aj = grid.at(j);
            // Half-open segments avoid counting shared endpoints twice.
            if aj >= hi && !(k + 1 == last && aj == hi) {
                continue;
            }
            if aj < lo {
                continue;
            }
            let t = (aj - a0) / (a1 - a0);
            sum[j] += s[k] + t * (s[k + 1] - s[k]);
            count[j] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { Some(s / f64::from(c)) } else { None })
        .collect()
}

/// Parameters of a synthetic measurement campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSpec {
    /// Ground truth; `drift_nm_per_curve` is applied in acquisition order.
    pub truth: CalibrationParams,
    pub voltages_mv: Vec<f64>,
    pub repetitions: u32,
    pub z_step_nm: f64,
    /// Separation range the approach covers (stops earlier on snap-in).
    pub a_min_nm: f64,
    pub a_max_nm: f64,
    /// Standard deviation of the force noise per raw sample, pN.
    pub noise_pn: f64,
    /// Injected dependence V₀(a) = V₀ + slope·(a − reference).
    pub v0_trend_mv_per_nm: f64,
    pub v0_trend_reference_nm: f64,
    pub seed: u64,
}

impl SynthesisSpec {
    pub fn new(truth: CalibrationParams, voltages_mv: Vec<f64>) -> Self {
        Self {
            truth,
            voltages_mv,
            repetitions: 10,
            z_step_nm: 0.2,
            a_min_nm: 60.0,
            a_max_nm: 600.0,
            noise_pn: 0.0,
            v0_trend_mv_per_nm: 0.0,
            v0_trend_reference_nm: 60.0,
            seed: 0,
        }
    }
}

/// Voltages placed symmetrically about `v0_mv` at the given offsets, the
/// arrangement used in the measurements (|V − V₀| up to about 68 mV).
pub fn symmetric_voltages(v0_mv: f64, offsets_mv: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = offsets_mv
        .iter()
        .flat_map(|d| [v0_mv - d, v0_mv + d])
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Simulates the approach curves by solving k̃S = F_cas(a) + X(a)(V − V₀)²
/// along the piezo path, from large separation inward. A curve ends at
/// `a_min_nm` or where the cantilever would snap to contact.
pub fn synthesize_curves<F>(
    spec: &SynthesisSpec,
    casimir_pn: F,
    x: &PolynomialX,
) -> Result<Vec<ForceDistanceCurve>>
where
    F: Fn(f64) -> f64 + Sync,
{
    spec.truth.validate()?;
    if spec.voltages_mv.is_empty() || spec.repetitions == 0 {
        return Err(Error::invalid(
            "synthesis needs at least one voltage and one repetition",
        ));
    }
    if !(spec.z_step_nm > 0.0) || !(spec.a_max_nm > spec.a_min_nm) || !(spec.noise_pn >= 0.0) {
        return Err(Error::invalid("invalid synthesis ranges or noise level"));
    }
    let t = spec.truth;
    let kt = t.k_tilde_pn_per_v();
    let n_v = spec.voltages_mv.len() as u32;
    let jobs: Vec<(u32, u32)> = (0..spec.repetitions)
        .flat_map(|rep| (0..n_v).map(move |vi| (rep, vi)))
        .collect();
    jobs.par_iter()
        .map(|&(rep, vi)| {
            let seq = rep * n_v + vi;
            let v = spec.voltages_mv[vi as usize];
            let z0 = t.z0_nm + t.drift_nm_per_curve * f64::from(seq);
            let total = |a: f64| {
                let v0 = t.v0_mv + spec.v0_trend_mv_per_nm * (a - spec.v0_trend_reference_nm);
                casimir_pn(a) + x.eval_unchecked(a) * (v - v0).powi(2)
            };
            let mut rng = rand::rngs::StdRng::seed_from_u64(
                spec.seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add(u64::from(seq)),
            );
            let noise = Normal::new(0.0, spec.noise_pn / kt)
                .map_err(|e| Error::invalid(format!("noise: {e}")))?;

            let mut k = ((spec.a_max_nm - z0) / spec.z_step_nm).floor() as i64;
            let mut z = k as f64 * spec.z_step_nm;
            let mut s = total(z0 + z) / kt;
            let mut zs = Vec::new();
            let mut ss = Vec::new();
            loop {
                // Newton on g(S) = k̃S − F(z₀ + z + mS).
                let mut converged = false;
                let mut stable = true;
                for _ in 0..50 {
                    let a = z0 + z + t.m_nm_per_v * s;
                    let h = 1e-4;
                    let f = total(a);
                    // A one-sided slope only slows convergence; the root
                    // itself is set by the residual.
                    let slope = (total(a + h) - f) / h;
                    let dg = kt - t.m_nm_per_v * slope;
                    if dg < 0.05 * kt {
                        stable = false;
                        break;
                    }
                    let step = (kt * s - f) / dg;
                    s -= step;
                    if step.abs() < 1e-15 + 1e-13 * s.abs() {
                        converged = true;
                        break;
                    }
                }
                if !stable || !converged {
                    break;
                }
                let a = z0 + z + t.m_nm_per_v * s;
                if a < spec.a_min_nm {
                    break;
                }
                zs.push(z);
                ss.push(s);
                k -= 1;
                z = k as f64 * spec.z_step_nm;
            }
            if zs.len() < 2 {
                return Err(Error::invalid(format!(
                    "synthetic curve at {v} mV snaps to contact before reaching {} nm",
                    spec.a_max_nm
                )));
            }
            zs.reverse();
            ss.reverse();
            for s in ss.iter_mut() {
                *s += noise.sample(&mut rng);
            }
            ForceDistanceCurve::new(v, rep, Some(seq), zs, ss)
        })
        .collect()
}

/// Options of [`fit_calibration`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub initial_m_nm_per_v: f64,
    pub initial_z0_nm: f64,
    /// Separations used in the fit, judged with the initial parameters.
    pub window_nm: (f64, f64),
    /// Width of the piezo bins the raw samples are averaged into.
    pub bin_step_nm: f64,
    /// Separation grid step for the per-separation parabolas.
    pub grid_step_nm: f64,
    /// Knot spacing in ln a of the spline for the voltage-independent force.
    pub spline_log_step: f64,
    /// Weight of the third-difference smoothing of that spline, in V⁻² of
    /// deflection residual; it only fixes directions the data leave free.
    pub smoothing: f64,
    /// Fit a linear drift of z₀ in acquisition order.
    pub drift_correction: bool,
    /// A V₀ trend is an anomaly only if it is significant at 95% and changes
    /// V₀ by more than this over the window.
    pub trend_tolerance_mv: f64,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            initial_m_nm_per_v: 100.0,
            initial_z0_nm: 30.0,
            window_nm: (60.0, 600.0),
            bin_step_nm: 1.0,
            grid_step_nm: 1.0,
            spline_log_step: 0.025,
            smoothing: 1e-4,
            drift_correction: false,
            trend_tolerance_mv: 1.5,
            max_iterations: 100,
        }
    }
}

/// Parabola-fit results at one separation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationFit {
    pub a_nm: f64,
    pub v0_mv: f64,
    pub v0_se_mv: f64,
    pub k_tilde_nn_per_v: f64,
    pub k_tilde_se_nn_per_v: f64,
    pub curves: usize,
}

/// Weighted regression of V₀ on separation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendTest {
    pub slope_mv_per_nm: f64,
    pub slope_se: f64,
    pub t_stat: f64,
    pub t_critical: f64,
    /// |slope| times the width of the analysed range.
    pub change_mv: f64,
    pub significant: bool,
    pub anomaly: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFit {
    pub params: CalibrationParams,
    pub per_separation: Vec<SeparationFit>,
    /// Weighted means over separations with 95% half-widths.
    pub v0_separation_mean: (f64, f64),
    pub k_tilde_separation_mean: (f64, f64),
    pub trend: TrendTest,
    pub rss: f64,
    pub dof: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    z: f64,
    s: f64,
    v: f64,
    seq: f64,
    /// Variance of the piezo positions averaged into this sample.
    z_var: f64,
    /// Model excess of the bin mean over the curve at the mean position.
    bin_offset: f64,
    /// √(raw samples averaged), the inverse noise scale of the sample.
    weight: f64,
}

/// Symmetric positive-definite matrix with three sub-diagonals.
#[derive(Clone)]
struct Banded4 {
    // a[i][d] = A[i][i − d]
    a: Vec<[f64; 4]>,
}

impl Banded4 {
    fn zeros(n: usize) -> Self {
        Self {
            a: vec![[0.0; 4]; n],
        }
    }

    fn len(&self) -> usize {
        self.a.len()
    }

    /// Cholesky factorisation in place; afterwards `a` holds L.
    fn factor(&mut self) -> Result<()> {
        let l = &mut self.a;
        for i in 0..l.len() {
            for d in (0..=3usize.min(i)).rev() {
                let j = i - d;
                let mut sum = l[i][d];
                for k in i.saturating_sub(3)..j {
                    sum -= l[i][i - k] * l[j][j - k];
                }
                if d == 0 {
                    if !(sum > 0.0) {
                        return Err(Error::invalid(
                            "spline normal matrix is not positive definite",
                        ));
                    }
                    l[i][0] = sum.sqrt();
                } else {
                    l[i][d] = sum / l[j][0];
                }
            }
        }
        Ok(())
    }

    /// Solves with the factor produced by [`Banded4::factor`].
    fn solve_factored(&self, rhs: &mut [f64]) {
        let l = &self.a;
        let n = l.len();
        for i in 0..n {
            let mut v = rhs[i];
            for d in 1..=3.min(i) {
                v -= l[i][d] * rhs[i - d];
            }
            rhs[i] = v / l[i][0];
        }
        for i in (0..n).rev() {
            let mut v = rhs[i];
            for d in 1..=3 {
                if i + d < n {
                    v -= l[i + d][d] * rhs[i + d];
                }
            }
            rhs[i] = v / l[i][0];
        }
    }

    fn add_outer(&mut self, i: usize, w: &[f64; 4]) {
        for p in 0..4 {
            for q in 0..=p {
                self.a[i + p][p - q] += w[p] * w[q];
            }
        }
    }

    fn scale_diagonal(&mut self, factor: f64) {
        for row in self.a.iter_mut() {
            row[0] *= factor;
        }
    }

    fn add_ridge(&mut self, rel: f64) {
        let max_diag = self.a.iter().map(|r| r[0]).fold(0.0, f64::max);
        for row in self.a.iter_mut() {
            row[0] += rel * max_diag;
        }
    }
}

/// Cubic B-spline basis with knots uniform in ln a, spaced by `step`, from
/// `lo` over `intervals` knot intervals.
#[derive(Debug, Clone, Copy)]
struct SplineBasis {
    ln_lo: f64,
    step: f64,
    intervals: usize,
}

impl SplineBasis {
    fn covering(lo: f64, hi: f64, step: f64) -> Self {
        Self {
            ln_lo: lo.ln(),
            step,
            intervals: ((hi / lo).ln() / step).ceil().max(1.0) as usize,
        }
    }

    fn functions(&self) -> usize {
        self.intervals + 3
    }

    /// Position in knot units: the first basis index, the offset t inside
    /// the interval (clamped to it) and the excess beyond the knot range.
    fn locate(&self, a: f64) -> (usize, f64, f64) {
        let u = (a.ln() - self.ln_lo) / self.step;
        let uc = u.clamp(0.0, self.intervals as f64);
        let i = (uc.floor() as usize).min(self.intervals - 1);
        (i, uc - i as f64, u - uc)
    }

    /// First basis index, the four weights and their a-derivatives. Outside
    /// the knot range the spline is continued linearly in ln a.
    fn eval(&self, a: f64) -> (usize, [f64; 4], [f64; 4]) {
        let (i, t, beyond) = self.locate(a);
        let omt = 1.0 - t;
        let du = 1.0 / (self.step * a);
        let w = [
            omt * omt * omt / 6.0,
            (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
            (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
            t * t * t / 6.0,
        ];
        let wu = weight_slopes(t);
        (
            i,
            std::array::from_fn(|q| w[q] + wu[q] * beyond),
            std::array::from_fn(|q| wu[q] * du),
        )
    }

    /// Second a-derivatives of the four weights at `a`.
    fn second(&self, a: f64) -> [f64; 4] {
        let (_, t, beyond) = self.locate(a);
        let du = 1.0 / (self.step * a);
        let wu = weight_slopes(t);
        let wuu = if beyond == 0.0 {
            [1.0 - t, 3.0 * t - 2.0, 1.0 - 3.0 * t, t]
        } else {
            [0.0; 4]
        };
        std::array::from_fn(|q| wuu[q] * du * du - wu[q] * du / a)
    }
}

/// Derivatives of the cubic B-spline weights with respect to the knot
/// coordinate.
fn weight_slopes(t: f64) -> [f64; 4] {
    [
        -0.5 * (1.0 - t).powi(2),
        1.5 * t * t - 2.0 * t,
        -1.5 * t * t + t + 0.5,
        0.5 * t * t,
    ]
}

/// Largest number of calibration parameters (m, z₀, V₀, κ, drift).
const MAX_THETA: usize = 5;

/// Bin spacing of the subsample used for the starting stages, nm.
const COARSE_SPACING_NM: f64 = 4.0;

/// Smallest 1 − m h' for a sample to enter the implicit fit.
const MIN_STABILITY: f64 = 0.4;
/// The same for a bin mean, whose curvature correction grows as (1 − m h')⁻³.
const MIN_BIN_STABILITY: f64 = 0.5;

/// One linearised sample: residual, spline block and parameter block of the
/// Jacobian.
struct Row {
    r: f64,
    i: usize,
    jg: [f64; 4],
    jt: [f64; MAX_THETA],
}

/// Least-squares problem for the calibration constants θ = (m, z₀, V₀, κ
/// [, drift]) with κ = 1/k̃, together with spline coefficients G of the
/// voltage-independent deflection. The model deflection solves
///
/// ```text
/// S = κX(a)(V − V₀)² + Σ G_b B_b(a),   a = z₀ + drift·n + z + mS
/// ```
///
/// for each noiseless piezo position, so only the measured S carries noise.
struct JointModel<'a> {
    samples: &'a [Sample],
    x: &'a PolynomialX,
    basis: SplineBasis,
    n_theta: usize,
    /// Weight of the third-difference penalty on the spline coefficients.
    penalty: f64,
    /// When false the separation is taken from the measured S (the
    /// errors-in-variables form, robust far from the solution but biased).
    implicit: bool,
    /// Last implicit solution per sample, the next Newton start.
    guess: RefCell<Vec<f64>>,
}

const THIRD_DIFFERENCE: [f64; 4] = [-1.0, 3.0, -3.0, 1.0];

impl JointModel<'_> {
    fn penalty_cost(&self, g: &[f64]) -> f64 {
        g.windows(4)
            .map(|w| {
                (0..4)
                    .map(|q| THIRD_DIFFERENCE[q] * w[q])
                    .sum::<f64>()
                    .powi(2)
            })
            .sum::<f64>()
            * self.penalty
    }

    /// Adds the penalty's Hessian and gradient halves.
    fn add_penalty(&self, a: &mut Banded4, grad: &mut [f64], g: &[f64]) {
        let scaled = THIRD_DIFFERENCE.map(|c| c * self.penalty.sqrt());
        for b in 0..g.len().saturating_sub(3) {
            a.add_outer(b, &scaled);
            let d: f64 = (0..4).map(|q| THIRD_DIFFERENCE[q] * g[b + q]).sum();
            for q in 0..4 {
                grad[b + q] += self.penalty * THIRD_DIFFERENCE[q] * d;
            }
        }
    }

    fn rows(&self, theta: &[f64], g: &[f64]) -> Result<Vec<Row>> {
        let mut guess = self.guess.borrow_mut();
        self.samples
            .iter()
            .zip(guess.iter_mut())
            .map(|(smp, start)| {
                let (row, _, s) = self.row(smp, *start, theta, g)?;
                *start = s;
                Ok(row)
            })
            .collect()
    }

    /// Residual row of one sample, the stability margin 1 − m h' and the
    /// model deflection, solving from `start`.
    fn row(&self, smp: &Sample, start: f64, theta: &[f64], g: &[f64]) -> Result<(Row, f64, f64)> {
        let (m, z0, v0, kappa) = (theta[0], theta[1], theta[2], theta[3]);
        let drift = if self.n_theta > 4 { theta[4] } else { 0.0 };
        let c = z0 + drift * smp.seq + smp.z;
        let dv = smp.v - v0;
        let e = dv * dv;
        let mut s = if self.implicit { start } else { smp.s };
        let mut bump = 1e-3 * s.abs() + 1e-9;
        let mut converged = false;
        let mut state = None;
        for _ in 0..60 {
            let a = c + m * s;
            let (i, w, dw) = self.basis.eval(a);
            let xa = self.x.eval_unchecked(a);
            let h = kappa * xa * e + (0..4).map(|p| w[p] * g[i + p]).sum::<f64>();
            let hp = kappa * self.x.derivative_unchecked(a) * e
                + (0..4).map(|p| dw[p] * g[i + p]).sum::<f64>();
            if !self.implicit {
                // r = S − h(a(S)) at the measured S.
                state = Some((i, w, xa, hp, 1.0));
                s = h;
                converged = true;
                break;
            }
            let d = 1.0 - m * hp;
            if !(d > 0.0) {
                // The stable solution is the largest root of the convex
                // s − h(c + ms); step right until the slope is positive.
                s += bump;
                bump *= 2.0;
                continue;
            }
            let step = (s - h) / d;
            state = Some((i, w, xa, hp, d));
            // Convergence is quadratic: after a step this small the error of
            // s is of order m²h''·step², far below 1e-12 V.
            if step.abs() <= 1e-12 + 1e-5 * s.abs() {
                s -= step;
                converged = true;
                break;
            }
            s -= step;
        }
        let Some((i, w, xa, hp, d)) = state.filter(|_| converged) else {
            return Err(Error::NonConvergence {
                what: "implicit deflection",
                iterations: 60,
                estimate: s,
                error: f64::NAN,
            });
        };
        // ds/dp = (∂h/∂p + h'·∂a/∂p) / (1 − m h').
        let s_at = if self.implicit { s } else { smp.s };
        let scale = smp.weight / d;
        let mut jt = [0.0; MAX_THETA];
        jt[0] = -hp * s_at * scale;
        jt[1] = -hp * scale;
        jt[2] = 2.0 * kappa * xa * dv * scale;
        jt[3] = -xa * e * scale;
        if self.n_theta > 4 {
            jt[4] = -hp * smp.seq * scale;
        }
        let jg = [-w[0] * scale, -w[1] * scale, -w[2] * scale, -w[3] * scale];
        let row = Row {
            r: smp.weight * (smp.s - smp.bin_offset - s),
            i,
            jg,
            jt,
        };
        Ok((row, 1.0 - m * hp, s))
    }
}

impl JointModel<'_> {
    /// ½S''·var for every sample at (θ, g), with S'' = h''/(1 − m h')³ along
    /// the stable solution.
    /// None marks samples that have drifted too close to snap-in for the
    /// expansion.
    fn bin_offsets(&self, theta: &[f64], g: &[f64]) -> Result<Vec<Option<f64>>> {
        let (m, z0, v0, kappa) = (theta[0], theta[1], theta[2], theta[3]);
        let drift = if self.n_theta > 4 { theta[4] } else { 0.0 };
        let guess = self.guess.borrow();
        self.samples
            .iter()
            .zip(guess.iter())
            .map(|(smp, &start)| {
                let (row, d, s) = self.row(smp, start, theta, g)?;
                if d < MIN_STABILITY {
                    return Ok(None);
                }
                if smp.z_var == 0.0 {
                    return Ok(Some(0.0));
                }
                let a = z0 + drift * smp.seq + smp.z + m * s;
                let w2 = self.basis.second(a);
                let x2 = self.x.second_derivative_unchecked(a) * (smp.v - v0).powi(2);
                let hpp = kappa * x2 + (0..4).map(|q| w2[q] * g[row.i + q]).sum::<f64>();
                Ok(Some(0.5 * smp.z_var * hpp / (d * d * d)))
            })
            .collect()
    }
}

fn cost(rows: &[Row]) -> f64 {
    rows.iter().map(|r| r.r * r.r).sum()
}

/// Normal equations of the linearised problem: banded spline block A,
/// coupling B, parameter block C and gradients.
struct NormalSystem {
    a: Banded4,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    gg: Vec<f64>,
    gt: DVector<f64>,
}

fn normal_equations(model: &JointModel, rows: &[Row], g: &[f64]) -> NormalSystem {
    let (nb, p) = (model.basis.functions(), model.n_theta);
    let mut a = Banded4::zeros(nb);
    let mut b = DMatrix::zeros(nb, p);
    let mut c = DMatrix::zeros(p, p);
    let mut gg = vec![0.0; nb];
    let mut gt = DVector::zeros(p);
    for row in rows {
        a.add_outer(row.i, &row.jg);
        for q in 0..4 {
            gg[row.i + q] += row.jg[q] * row.r;
            for k in 0..p {
                b[(row.i + q, k)] += row.jg[q] * row.jt[k];
            }
        }
        for k in 0..p {
            gt[k] += row.jt[k] * row.r;
            for l in 0..=k {
                c[(k, l)] += row.jt[k] * row.jt[l];
            }
        }
    }
    for k in 0..p {
        for l in 0..k {
            c[(l, k)] = c[(k, l)];
        }
    }
    model.add_penalty(&mut a, &mut gg, g);
    NormalSystem { a, b, c, gg, gt }
}

/// Eliminates the spline block: returns the Schur complement
/// S = C − BᵀA⁻¹B, the parameter step Δθ for damping `lambda` and the
/// matching linearised spline update.
/// Reduced Levenberg–Marquardt step: returns the Schur complement of the
/// damped system, the θ step and the spline step.
fn reduced_step(n: &NormalSystem, lambda: f64) -> Result<(DMatrix<f64>, DVector<f64>, Vec<f64>)> {
    let nb = n.a.len();
    let p = n.c.nrows();
    // Marquardt damping of both blocks; λ = 0 gives the Gauss-Newton step
    // and the undamped Schur complement.
    let mut a = n.a.clone();
    a.scale_diagonal(1.0 + lambda);
    a.add_ridge(1e-12);
    a.factor()?;
    let mut y = n.gg.clone();
    a.solve_factored(&mut y);
    let mut ainv_b = DMatrix::zeros(nb, p);
    for k in 0..p {
        let mut col: Vec<f64> = n.b.column(k).iter().copied().collect();
        a.solve_factored(&mut col);
        ainv_b.set_column(k, &DVector::from_vec(col));
    }
    let mut c = n.c.clone();
    for k in 0..p {
        c[(k, k)] *= 1.0 + lambda;
    }
    let schur = c - n.b.transpose() * &ainv_b;
    let damped = schur.clone();
    let rhs = -&n.gt + n.b.transpose() * DVector::from_vec(y.clone());
    let d_theta = damped
        .cholesky()
        .ok_or_else(|| {
            Error::data("calibration parameters are not identifiable from these curves")
        })?
        .solve(&rhs);
    let corr = &ainv_b * &d_theta;
    let d_g = (0..nb).map(|i| -y[i] - corr[i]).collect();
    Ok((schur, d_theta, d_g))
}

/// Best spline coefficients for fixed θ, by Gauss-Newton from `g`.
fn optimise_spline(
    model: &JointModel,
    theta: &[f64],
    mut g: Vec<f64>,
) -> Result<(Vec<f64>, Vec<Row>, f64)> {
    let nb = model.basis.functions();
    let mut rows = model.rows(theta, &g)?;
    let mut current = cost(&rows) + model.penalty_cost(&g);
    for _ in 0..5 {
        let mut a = Banded4::zeros(nb);
        let mut grad = vec![0.0; nb];
        for row in &rows {
            a.add_outer(row.i, &row.jg);
            for q in 0..4 {
                grad[row.i + q] += row.jg[q] * row.r;
            }
        }
        model.add_penalty(&mut a, &mut grad, &g);
        a.add_ridge(1e-12);
        a.factor()?;
        a.solve_factored(&mut grad);
        let trial: Vec<f64> = g.iter().zip(&grad).map(|(g, d)| g - d).collect();
        let Ok(trial_rows) = model.rows(theta, &trial) else {
            break;
        };
        let c = cost(&trial_rows) + model.penalty_cost(&trial);
        if !(c < current) {
            break;
        }
        let gain = current - c;
        g = trial;
        rows = trial_rows;
        current = c;
        if gain <= 1e-10 * current {
            break;
        }
    }
    Ok((g, rows, current))
}

struct JointOutcome {
    theta: Vec<f64>,
    rss: f64,
    /// Undamped Schur complement at the solution (θ-block of the inverse
    /// covariance up to σ²).
    schur: DMatrix<f64>,
    /// Spline coefficients at the solution.
    g: Vec<f64>,
    iterations: usize,
}

/// Levenberg–Marquardt on θ with the spline re-optimised at every trial.
/// Parameter changes below this fraction of their standard error are
/// treated as converged; smaller moves do not change the fit statistically.
const CONVERGENCE_SE_FRACTION: f64 = 0.1;

fn fit_joint(
    model: &JointModel,
    theta0: Vec<f64>,
    g0: Vec<f64>,
    max_iterations: usize,
) -> Result<JointOutcome> {
    let nb = model.basis.functions();
    let p = model.n_theta;
    let dof = model.samples.len().saturating_sub(nb + p).max(1) as f64;
    let mut theta = theta0;
    let (mut g, mut rows, mut current) = optimise_spline(model, &theta, g0)?;
    let mut lambda = 1e-6;
    for it in 1..=max_iterations {
        let normal = normal_equations(model, &rows, &g);
        let (schur, gn_step, _) = reduced_step(&normal, 0.0)?;
        // Converged once the Gauss-Newton step is far below the statistical
        // uncertainty (or at working precision for exact data).
        let inv = schur.clone().try_inverse();
        let negligible = gn_step.iter().zip(&theta).enumerate().all(|(k, (d, t))| {
            let se = inv
                .as_ref()
                .map_or(0.0, |inv| (current / dof * inv[(k, k)]).max(0.0).sqrt());
            d.abs() <= (1e-11 * t.abs().max(1e-6)).max(CONVERGENCE_SE_FRACTION * se)
        });
        if negligible {
            return Ok(JointOutcome {
                theta,
                rss: current,
                schur,
                g,
                iterations: it,
            });
        }
        let mut accepted = None;
        let mut rejections = 0;
        for _ in 0..15 {
            let (_, d_theta, d_g) = reduced_step(&normal, lambda)?;
            let trial_theta: Vec<f64> = theta
                .iter()
                .zip(d_theta.iter())
                .map(|(t, d)| t + d)
                .collect();
            let trial_g: Vec<f64> = g.iter().zip(&d_g).map(|(a, b)| a + b).collect();
            let res = optimise_spline(model, &trial_theta, trial_g);
            if let Ok((tg, tr, c)) = res {
                if c <= current {
                    accepted = Some((trial_theta, tg, tr, c));
                    break;
                }
            }
            lambda *= 10.0;
            rejections += 1;
        }
        let Some((t, gg, r, c)) = accepted else {
            // No downhill step at any damping: converged to working precision.
            return Ok(JointOutcome {
                theta,
                rss: current,
                schur,
                g,
                iterations: it,
            });
        };
        theta = t;
        g = gg;
        rows = r;
        current = c;
        // Only relax the damping after a step that needed no increase, so a
        // problem that is stiff at small damping is not retried every time.
        if rejections == 0 {
            lambda = (lambda / 10.0).max(1e-12);
        }
    }
    Err(Error::NonConvergence {
        what: "calibration fit",
        iterations: max_iterations,
        estimate: current,
        error: f64::NAN,
    })
}

/// Starting spline coefficients: linear least squares of the
/// voltage-independent deflection with separations taken from the data.
fn initial_spline(model: &JointModel, theta: &[f64]) -> Result<Vec<f64>> {
    let (m, z0, v0, kappa) = (theta[0], theta[1], theta[2], theta[3]);
    let nb = model.basis.functions();
    let mut a = Banded4::zeros(nb);
    let mut rhs = vec![0.0; nb];
    for smp in model.samples {
        let pos = z0 + smp.z + m * smp.s;
        let y = smp.s - kappa * model.x.eval_unchecked(pos) * (smp.v - v0).powi(2);
        let (i, w, _) = model.basis.eval(pos);
        let w = w.map(|w| w * smp.weight);
        a.add_outer(i, &w);
        for q in 0..4 {
            rhs[i + q] += w[q] * y * smp.weight;
        }
    }
    model.add_penalty(&mut a, &mut vec![0.0; nb], &vec![0.0; nb]);
    a.add_ridge(1e-12);
    a.factor()?;
    a.solve_factored(&mut rhs);
    Ok(rhs)
}

/// Half-width in samples of the local mean used for window selection.
const SELECTION_HALF_WIDTH: usize = 5;

fn local_mean(s: &[f64], half: usize) -> Vec<f64> {
    (0..s.len())
        .map(|i| {
            let w = &s[i.saturating_sub(half)..(i + half + 1).min(s.len())];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

type Resampled<'a> = (f64, Option<u32>, BinnedCurve, &'a ForceDistanceCurve);

/// One pass of the joint fit.
#[derive(Debug, Clone, Copy)]
struct Stage {
    window: (f64, f64),
    /// False for the errors-in-variables form.
    implicit: bool,
    /// Only every `stride`-th bin of each curve is used.
    stride: usize,
    /// Account for the curvature of S(z) inside the bins.
    bin_offsets: bool,
}

/// Fits θ and the spline for one stage, selecting samples with `theta0`.
/// Returns the outcome and the residual degrees of freedom.
fn fit_stage(
    resampled: &[Resampled],
    x: &PolynomialX,
    theta0: &[f64],
    stage: Stage,
    options: &FitOptions,
) -> Result<(JointOutcome, usize)> {
    let (lo, hi) = stage.window;
    let drift = theta0.get(4).copied().unwrap_or(0.0);
    let mut samples = Vec::new();
    // (curve, first raw sample, raw count) behind each sample.
    let mut origins = Vec::new();
    for (curve, (v, seq, bins, _)) in resampled.iter().enumerate() {
        let (z, s) = (&bins.z_nm, &bins.s_v);
        let seq = f64::from(seq.unwrap_or(0));
        // Selecting on the raw deflection would correlate membership with the
        // noise, so a local mean decides which samples are in the window.
        let smooth = local_mean(s, SELECTION_HALF_WIDTH);
        let mut first_raw = 0;
        for (k, (((&zz, &ss), &sm), &z_var)) in z
            .iter()
            .zip(s)
            .zip(&smooth)
            .zip(&bins.z_var_nm2)
            .enumerate()
        {
            let a = theta0[1] + drift * seq + zz + theta0[0] * sm;
            let raw = (curve, first_raw, bins.counts[k]);
            first_raw += bins.counts[k];
            if a >= lo && a <= hi && k % stage.stride == 0 {
                origins.push(raw);
                samples.push(Sample {
                    z: zz,
                    s: ss,
                    v: *v,
                    seq,
                    z_var,
                    bin_offset: 0.0,
                    weight: (bins.counts[k] as f64).sqrt(),
                });
            }
        }
    }
    let basis = SplineBasis::covering(lo, hi, options.spline_log_step);
    let model = JointModel {
        samples: &samples,
        x,
        basis,
        n_theta: theta0.len(),
        penalty: options.smoothing,
        implicit: stage.implicit,
        guess: RefCell::new(samples.iter().map(|smp| smp.s).collect()),
    };
    let g0 = initial_spline(&model, theta0)?;
    if stage.implicit {
        // Samples on the verge of snap-in at the starting point have no
        // stable solution nearby and are left out. Bins too close for the
        // curvature expansion are replaced by their raw samples.
        let stable = |smp: &Sample, min: f64| matches!(model.row(smp, smp.s, theta0, &g0), Ok((_, d, _)) if d >= min);
        let mut kept = Vec::with_capacity(samples.len());
        for (smp, &(curve, first, count)) in samples.iter().zip(&origins) {
            if !stage.bin_offsets || smp.z_var == 0.0 {
                if stable(smp, MIN_STABILITY) {
                    kept.push(*smp);
                }
            } else if stable(smp, MIN_BIN_STABILITY) {
                kept.push(*smp);
            } else {
                let raw = resampled[curve].3;
                for j in first..first + count {
                    let r = Sample {
                        z: raw.z_piezo_nm[j],
                        s: raw.s_def_v[j],
                        z_var: 0.0,
                        weight: 1.0,
                        ..*smp
                    };
                    if stable(&r, MIN_STABILITY) {
                        kept.push(r);
                    }
                }
            }
        }
        samples = kept;
    }
    // Unbinned data have no within-bin spread to correct for.
    let use_offsets = stage.bin_offsets && samples.iter().any(|smp| smp.z_var > 0.0);
    let fit = |samples: &[Sample], theta: Vec<f64>, g: Vec<f64>, guess: Vec<f64>| {
        let model = JointModel {
            samples,
            x,
            basis,
            n_theta: theta0.len(),
            penalty: options.smoothing,
            implicit: stage.implicit,
            guess: RefCell::new(guess),
        };
        let outcome = fit_joint(&model, theta, g, options.max_iterations)?;
        let offsets = if use_offsets {
            Some(model.bin_offsets(&outcome.theta, &outcome.g)?)
        } else {
            None
        };
        Ok::<_, Error>((outcome, offsets, model.guess.into_inner()))
    };
    let mut g0 = g0;
    if use_offsets {
        // Offsets from the spline refitted at the starting parameters, so
        // that the first fit already sees nearly the final ones.
        let model = JointModel {
            samples: &samples,
            x,
            basis,
            n_theta: theta0.len(),
            penalty: options.smoothing,
            implicit: true,
            guess: RefCell::new(samples.iter().map(|smp| smp.s).collect()),
        };
        g0 = optimise_spline(&model, theta0, g0)?.0;
        let offsets = model.bin_offsets(theta0, &g0)?;
        let mut kept = Vec::with_capacity(samples.len());
        for (smp, o) in samples.iter().zip(offsets) {
            if let Some(o) = o {
                kept.push(Sample {
                    bin_offset: o,
                    ..*smp
                });
            }
        }
        samples = kept;
    }
    let dof_of = |n: usize| {
        n.checked_sub(basis.functions() + theta0.len())
            .filter(|d| *d > 0)
            .ok_or_else(|| Error::data("too few samples inside the calibration window"))
    };
    let mut dof = dof_of(samples.len())?;
    let start = samples.iter().map(|smp| smp.s).collect();
    let (mut outcome, mut offsets, mut guess) = fit(&samples, theta0.to_vec(), g0, start)?;
    // The bin offsets depend weakly on the solution, so they are updated
    // until the parameters settle.
    for _ in 0..5 {
        let Some(new) = offsets else { break };
        let mut kept = Vec::with_capacity(samples.len());
        let mut kept_guess = Vec::with_capacity(samples.len());
        for ((smp, o), s) in samples.iter().zip(new).zip(&guess) {
            if let Some(o) = o {
                kept.push(Sample {
                    bin_offset: o,
                    ..*smp
                });
                kept_guess.push(*s);
            }
        }
        samples = kept;
        guess = kept_guess;
        dof = dof_of(samples.len())?;
        let previous = outcome.theta.clone();
        let se = standard_errors(&outcome, dof);
        (outcome, offsets, guess) = fit(&samples, outcome.theta.clone(), outcome.g.clone(), guess)?;
        let settled = outcome
            .theta
            .iter()
            .zip(&previous)
            .zip(&se)
            .all(|((new, old), se)| {
                (new - old).abs() <= (1e-11 * old.abs().max(1e-6)).max(CONVERGENCE_SE_FRACTION * se)
            });
        if settled {
            break;
        }
    }
    Ok((outcome, dof))
}

/// Standard errors of θ from the Schur complement and the residual variance.
fn standard_errors(outcome: &JointOutcome, dof: usize) -> Vec<f64> {
    let var = outcome.rss / dof.max(1) as f64;
    let inv = outcome.schur.clone().try_inverse();
    (0..outcome.theta.len())
        .map(|k| {
            inv.as_ref()
                .map_or(0.0, |inv| (var * inv[(k, k)]).max(0.0).sqrt())
        })
        .collect()
}

/// Per-separation parabolas of S_def against V on the grid.
fn separation_fits(
    resampled: &[Resampled],
    calib: &CalibrationParams,
    x: &PolynomialX,
    grid: &SeparationGrid,
) -> Result<Vec<SeparationFit>> {
    let mapped: Vec<(f64, Vec<Option<f64>>)> = resampled
        .iter()
        .map(|(v, seq, bins, _)| {
            let (z, s) = (&bins.z_nm, &bins.s_v);
            let z0 = calib.z0_for(*seq);
            let a: Vec<f64> = z
                .iter()
                .zip(s)
                .map(|(z, s)| z0 + z + calib.m_nm_per_v * s)
                .collect();
            (*v, interpolate_to_grid(&a, s, grid))
        })
        .collect();
    let mut fits = Vec::new();
    for j in 0..grid.len {
        let (vs, ss): (Vec<f64>, Vec<f64>) = mapped
            .iter()
            .filter_map(|(v, g)| g[j].map(|s| (*v, s)))
            .unzip();
        let mut distinct = vs.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        if distinct.len() < 3 || vs.len() < 4 {
            continue;
        }
        let a = grid.at(j);
        let Ok(p) = fit_parabola(&vs, &ss) else {
            continue;
        };
        let c2 = p.coeffs[2];
        // X < 0, so the parabolas open downward.
        if !(c2 < 0.0) || !x.contains(a) {
            continue;
        }
        // c₂ = X/k̃ in V/mV² with X in pN/mV².
        let k_tilde = x.eval(a)? / c2 / 1e3;
        // Floors keep the weights finite for noiseless input.
        let k_se = (k_tilde * p.cov[2][2].max(0.0).sqrt() / c2.abs()).max(1e-12 * k_tilde);
        let v0_se = p.vertex_se().max(1e-9);
        if !(v0_se.is_finite() && k_se.is_finite()) {
            continue;
        }
        fits.push(SeparationFit {
            a_nm: a,
            v0_mv: p.vertex(),
            v0_se_mv: v0_se,
            k_tilde_nn_per_v: k_tilde,
            k_tilde_se_nn_per_v: k_se,
            curves: vs.len(),
        });
    }
    Ok(fits)
}

fn weighted_mean_95(values: &[f64], se: &[f64]) -> Result<(f64, f64)> {
    let w: Vec<f64> = se.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let m = values.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>() / sw;
    let n = values.len();
    let chi2: f64 = values
        .iter()
        .zip(&w)
        .map(|(v, w)| w * (v - m).powi(2))
        .sum();
    let se_mean = (chi2 / (n - 1) as f64 / sw).sqrt();
    Ok((m, t_quantile_95(n - 1)? * se_mean))
}

/// Weighted regression of the per-separation V₀ on separation.
fn trend_test(per_separation: &[SeparationFit], tolerance_mv: f64) -> Result<TrendTest> {
    let a: Vec<f64> = per_separation.iter().map(|f| f.a_nm).collect();
    let v0s: Vec<f64> = per_separation.iter().map(|f| f.v0_mv).collect();
    let weights: Vec<f64> = per_separation
        .iter()
        .map(|f| 1.0 / (f.v0_se_mv * f.v0_se_mv))
        .collect();
    let line = weighted_line_fit(&a, &v0s, &weights)?;
    let t_critical = t_quantile_95(line.dof)?;
    let t_stat = if line.slope_se > 0.0 {
        line.slope / line.slope_se
    } else {
        0.0
    };
    let change_mv = line.slope.abs() * (a[a.len() - 1] - a[0]);
    let significant = t_stat.abs() > t_critical;
    Ok(TrendTest {
        slope_mv_per_nm: line.slope,
        slope_se: line.slope_se,
        t_stat,
        t_critical,
        change_mv,
        significant,
        anomaly: significant && change_mv > tolerance_mv,
    })
}

fn anomaly(trend: &TrendTest) -> Error {
    Error::CalibrationAnomaly {
        slope_mv_per_nm: trend.slope_mv_per_nm,
        t_stat: trend.t_stat,
        change_mv: trend.change_mv,
    }
}

/// Fits the calibration constants to curves recorded at ≥ 3 voltages.
pub fn fit_calibration(
    curves: &[ForceDistanceCurve],
    x: &PolynomialX,
    options: &FitOptions,
) -> Result<CalibrationFit> {
    let mut distinct: Vec<f64> = curves.iter().map(|c| c.voltage_mv).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::invalid(format!(
            "calibration needs curves at 3 or more distinct voltages, got {}",
            distinct.len()
        )));
    }
    if options.drift_correction && curves.iter().any(|c| c.sequence.is_none()) {
        return Err(Error::invalid(
            "drift correction needs a `# sequence=` header on every curve",
        ));
    }
    let (w_lo, w_hi) = options.window_nm;
    let grid = SeparationGrid::covering(w_lo, w_hi, options.grid_step_nm)?;
    let resampled: Vec<Resampled> = curves
        .iter()
        .map(|c| (c.voltage_mv, c.sequence, c.binned(options.bin_step_nm), c))
        .collect();

    // Starting values of V₀ and k̃ from the parabolas at the initial m, z₀.
    let mut start =
        CalibrationParams::exact(0.0, options.initial_m_nm_per_v, options.initial_z0_nm, 1.0);
    let initial = separation_fits(&resampled, &start, x, &grid)?;
    if initial.len() < 3 {
        return Err(Error::data(format!(
            "curves overlap at only {} separations inside [{w_lo}, {w_hi}] nm",
            initial.len()
        )));
    }
    let v0_init = weighted_mean_95(
        &initial.iter().map(|f| f.v0_mv).collect::<Vec<_>>(),
        &initial.iter().map(|f| f.v0_se_mv).collect::<Vec<_>>(),
    )?
    .0;
    let k_init = weighted_mean_95(
        &initial
            .iter()
            .map(|f| f.k_tilde_nn_per_v)
            .collect::<Vec<_>>(),
        &initial
            .iter()
            .map(|f| f.k_tilde_se_nn_per_v)
            .collect::<Vec<_>>(),
    )?
    .0;
    start.v0_mv = v0_init;
    start.k_tilde_nn_per_v = k_init;

    let mut theta0 = vec![
        start.m_nm_per_v,
        start.z0_nm,
        start.v0_mv,
        1.0 / start.k_tilde_pn_per_v(),
    ];
    if options.drift_correction {
        theta0.push(0.0);
    }
    // The errors-in-variables form converges from a rough start but is
    // biased; the implicit form is unbiased but needs a good start, most of
    // all near the snap-in point. So the constants are fitted further out
    // first and then refined over the whole window.
    let inner = if w_hi - w_lo >= 120.0 {
        (w_lo + 20.0, w_hi)
    } else {
        (w_lo, w_hi)
    };
    let stride = ((COARSE_SPACING_NM / options.bin_step_nm).round() as usize).max(1);
    let coarse = |implicit| Stage {
        window: inner,
        implicit,
        stride,
        bin_offsets: false,
    };
    let eiv = fit_stage(&resampled, x, &theta0, coarse(false), options)?
        .0
        .theta;
    let full = Stage {
        window: (w_lo, w_hi),
        implicit: true,
        stride: 1,
        bin_offsets: true,
    };
    let refined = fit_stage(&resampled, x, &eiv, coarse(true), options)
        .and_then(|(o, _)| fit_stage(&resampled, x, &o.theta, full, options));
    let (outcome, dof) = match refined {
        Ok(done) => done,
        Err(e) => {
            // A V₀ that changes with separation has no consistent implicit
            // solution; report it as such when the rough constants show it.
            let mut rough = start;
            rough.m_nm_per_v = eiv[0];
            rough.z0_nm = eiv[1];
            rough.v0_mv = eiv[2];
            rough.k_tilde_nn_per_v = 1.0 / eiv[3] / 1e3;
            rough.drift_nm_per_curve = eiv.get(4).copied().unwrap_or(0.0);
            let fits = separation_fits(&resampled, &rough, x, &grid)?;
            if fits.len() >= 3 {
                let trend = trend_test(&fits, options.trend_tolerance_mv)?;
                if trend.anomaly {
                    return Err(anomaly(&trend));
                }
            }
            return Err(e);
        }
    };
    let sigma2 = outcome.rss / dof as f64;
    let cov = outcome.schur.clone().try_inverse().ok_or_else(|| {
        Error::data("calibration parameters are not identifiable from these curves")
    })? * sigma2;
    let t95 = t_quantile_95(dof)?;
    let se = |k: usize| cov[(k, k)].max(0.0).sqrt();
    let th = &outcome.theta;
    let kappa = th[3];
    let mut params = CalibrationParams {
        v0_mv: th[2],
        v0_hw_mv: t95 * se(2),
        m_nm_per_v: th[0],
        m_hw_nm_per_v: t95 * se(0),
        z0_nm: th[1],
        z0_hw_nm: t95 * se(1),
        k_tilde_nn_per_v: 1.0 / kappa / 1e3,
        k_tilde_hw_nn_per_v: t95 * se(3) / (kappa * kappa) / 1e3,
        drift_nm_per_curve: 0.0,
        drift_hw_nm_per_curve: 0.0,
    };
    if options.drift_correction {
        params.drift_nm_per_curve = th[4];
        params.drift_hw_nm_per_curve = t95 * se(4);
    }
    params.validate()?;

    let per_separation = separation_fits(&resampled, &params, x, &grid)?;
    if per_separation.len() < 3 {
        return Err(Error::data(
            "too few separations for the residual-potential trend test",
        ));
    }
    let trend = trend_test(&per_separation, options.trend_tolerance_mv)?;
    if trend.anomaly {
        return Err(anomaly(&trend));
    }
    let v0s: Vec<f64> = per_separation.iter().map(|f| f.v0_mv).collect();
    let v0_se: Vec<f64> = per_separation.iter().map(|f| f.v0_se_mv).collect();
    let ks: Vec<f64> = per_separation.iter().map(|f| f.k_tilde_nn_per_v).collect();
    let k_se: Vec<f64> = per_separation
        .iter()
        .map(|f| f.k_tilde_se_nn_per_v)
        .collect();
    Ok(CalibrationFit {
        params,
        v0_separation_mean: weighted_mean_95(&v0s, &v0_se)?,
        k_tilde_separation_mean: weighted_mean_95(&ks, &k_se)?,
        per_separation,
        trend,
        rss: outcome.rss,
        dof,
        iterations: outcome.iterations,
    })
}

/// One extracted Casimir force value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceSample {
    pub force_pn: f64,
    pub voltage_mv: f64,
    pub s_def_v: f64,
}

/// Casimir force samples on a separation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedForces {
    pub a_nm: Vec<f64>,
    pub samples: Vec<Vec<ForceSample>>,
}

impl ExtractedForces {
    pub fn mean(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| mean(&s.iter().map(|x| x.force_pn).collect::<Vec<_>>()))
            .collect()
    }

    pub fn forces_at(&self, j: usize) -> Vec<f64> {
        self.samples[j].iter().map(|s| s.force_pn).collect()
    }

    /// Index of the grid point closest to `a_nm`.
    pub fn index_of(&self, a_nm: f64) -> Option<usize> {
        self.a_nm
            .iter()
            .enumerate()
            .min_by(|x, y| (x.1 - a_nm).abs().total_cmp(&(y.1 - a_nm).abs()))
            .map(|(j, _)| j)
    }

    /// (voltage, mean force, count) at grid point `j`.
    pub fn mean_by_voltage(&self, j: usize) -> Vec<(f64, f64, usize)> {
        let mut vs: Vec<f64> = self.samples[j].iter().map(|s| s.voltage_mv).collect();
        vs.sort_by(f64::total_cmp);
        vs.dedup();
        vs.into_iter()
            .map(|v| {
                let f: Vec<f64> = self.samples[j]
                    .iter()
                    .filter(|s| s.voltage_mv == v)
                    .map(|s| s.force_pn)
                    .collect();
                (v, mean(&f), f.len())
            })
            .collect()
    }
}

/// F = k̃ S_def − X(a)(V − V₀)² for every curve on a grid of step
/// `step_nm` over `range_nm`. The raw samples are mapped to separations and
/// interpolated linearly onto the grid. Grid points reached by fewer than two
/// curves are dropped.
pub fn extract_casimir(
    curves: &[ForceDistanceCurve],
    calib: &CalibrationParams,
    x: &PolynomialX,
    range_nm: (f64, f64),
    step_nm: f64,
) -> Result<ExtractedForces> {
    calib.validate()?;
    if curves.is_empty() {
        return Err(Error::data("no curves to extract forces from"));
    }
    let grid = SeparationGrid::covering(range_nm.0, range_nm.1, step_nm)?;
    let kt = calib.k_tilde_pn_per_v();
    let mapped: Vec<(f64, Vec<Option<f64>>)> = curves
        .iter()
        .map(|c| {
            let z0 = calib.z0_for(c.sequence);
            let a: Vec<f64> = c
                .z_piezo_nm
                .iter()
                .zip(&c.s_def_v)
                .map(|(z, s)| z0 + z + calib.m_nm_per_v * s)
                .collect();
            (c.voltage_mv, interpolate_to_grid(&a, &c.s_def_v, &grid))
        })
        .collect();
    let mut a_out = Vec::new();
    let mut samples = Vec::new();
    for j in 0..grid.len {
        let a = grid.at(j);
        if !x.contains(a) {
            continue;
        }
        let xa = x.eval(a)?;
        let here: Vec<ForceSample> = mapped
            .iter()
            .filter_map(|(v, g)| {
                g[j].map(|s| ForceSample {
                    force_pn: kt * s - xa * (v - calib.v0_mv).powi(2),
                    voltage_mv: *v,
                    s_def_v: s,
                })
            })
            .collect();
        if here.len() >= 2 {
            a_out.push(a);
            samples.push(here);
        }
    }
    if a_out.is_empty() {
        return Err(Error::data(format!(
            "no separation in [{}, {}] nm is covered by two or more curves",
            range_nm.0, range_nm.1
        )));
    }
    Ok(ExtractedForces {
        a_nm: a_out,
        samples,
    })
}

/// Instrument contributions to the systematic error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystematicSpec {
    /// Force noise floor at 95% confidence, pN.
    pub noise_floor_pn: f64,
}

impl Default for SystematicSpec {
    fn default() -> Self {
        Self {
            noise_floor_pn: 1.0,
        }
    }
}

/// 95% confidence errors at one separation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBudgetRow {
    pub a_nm: f64,
    pub mean_pn: f64,
    pub random_pn: f64,
    pub systematic_pn: f64,
    pub total_pn: f64,
    pub separation_nm: f64,
    pub samples: usize,
}

/// Random error is the Student-t half-width of the mean. The systematic
/// error combines the noise floor, the k̃ uncertainty and the electric-force
/// subtraction error (from Δz₀ and ΔV₀, averaged over the applied voltages)
/// in quadrature; the total adds random and systematic in quadrature.
pub fn error_budget(
    forces: &ExtractedForces,
    calib: &CalibrationParams,
    x: &PolynomialX,
    systematic: &SystematicSpec,
) -> Result<Vec<ErrorBudgetRow>> {
    let mut rows = Vec::with_capacity(forces.a_nm.len());
    for (j, &a) in forces.a_nm.iter().enumerate() {
        let f = forces.forces_at(j);
        if f.len() < 2 {
            return Err(Error::invalid(format!(
                "error budget needs two or more samples at {a} nm"
            )));
        }
        let random = mean_half_width_95(&f)?;
        let xa = x.eval(a)?;
        let dxa = x.derivative(a)?;
        let electric = mean(
            &forces.samples[j]
                .iter()
                .map(|s| {
                    let dv = s.voltage_mv - calib.v0_mv;
                    let from_z0 = dxa * calib.z0_hw_nm * dv * dv;
                    let from_v0 = 2.0 * xa * dv * calib.v0_hw_mv;
                    from_z0.hypot(from_v0)
                })
                .collect::<Vec<_>>(),
        );
        let mean_abs_s = mean(
            &forces.samples[j]
                .iter()
                .map(|s| s.s_def_v.abs())
                .collect::<Vec<_>>(),
        );
        let from_k = calib.k_tilde_hw_nn_per_v * 1e3 * mean_abs_s;
        let systematic_pn =
            (systematic.noise_floor_pn.powi(2) + from_k.powi(2) + electric.powi(2)).sqrt();
        let total = random.hypot(systematic_pn);
        let mean_s = mean(
            &forces.samples[j]
                .iter()
                .map(|s| s.s_def_v)
                .collect::<Vec<_>>(),
        );
        rows.push(ErrorBudgetRow {
            a_nm: a,
            mean_pn: mean(&f),
            random_pn: random,
            systematic_pn,
            total_pn: total,
            separation_nm: calib.z0_hw_nm.hypot(calib.m_hw_nm_per_v * mean_s.abs()),
            samples: f.len(),
        });
    }
    Ok(rows)
}

/// Writes the experiment table consumed by the comparison step.
pub fn write_budget_csv<W: std::io::Write>(writer: W, rows: &[ErrorBudgetRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e| Error::csv("experiment output", e);
    w.write_record([
        "a_nm",
        "f_mean_pn",
        "random_pn",
        "systematic_pn",
        "total_pn",
        "separation_error_nm",
        "samples",
    ])
    .map_err(err)?;
    for r in rows {
        w.write_record([
            format!("{}", r.a_nm),
            format!("{:.6e}", r.mean_pn),
            format!("{:.6e}", r.random_pn),
            format!("{:.6e}", r.systematic_pn),
            format!("{:.6e}", r.total_pn),
            format!("{:.6e}", r.separation_nm),
            r.samples.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("experiment output", e))?;
    Ok(())
}

pub fn read_budget_csv<R: Read>(reader: R, origin: &str) -> Result<Vec<ErrorBudgetRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::csv(origin, e))?.clone();
    let expected = [
        "a_nm",
        "f_mean_pn",
        "random_pn",
        "systematic_pn",
        "total_pn",
        "separation_error_nm",
        "samples",
    ];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::data(format!(
            "{origin}: expected header `{}`",
            expected.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(origin, e))?;
        let bad = || Error::data(format!("{origin}: row {} is malformed", i + 1));
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if v.len() != 7 {
            return Err(bad());
        }
        rows.push(ErrorBudgetRow {
            a_nm: v[0],
            mean_pn: v[1],
            random_pn: v[2],
            systematic_pn: v[3],
            total_pn: v[4],
            separation_nm: v[5],
            samples: v[6] as usize,
        });
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{origin}: no rows")));
    }
    Ok(rows)
}

/// Summary of a sample set: mean, sample standard deviation and count.
pub fn describe(samples: &[f64]) -> (f64, f64, usize) {
    (mean(samples), sample_sd(samples), samples.len())
}
