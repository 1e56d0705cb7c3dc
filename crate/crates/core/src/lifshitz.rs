//! Finite-temperature Lifshitz free energy of a planar layered system and the
//! proximity-force sphere-plate force.
//!
//! With y = 2q₀a/ħc the free energy per unit area is
//!
//! ```text
//! E(a, T) = k_B T / (2π) · 1/(4a²) · Σ′_l ∫_{y_l}^∞ y dy Σ_pol ln(1 − r_up r_dn e^{−y})
//! ```
//!
//! where y_l = 2ξ_l a/ħc and the primed sum gives the l = 0 term weight ½.
//! Reflection coefficients of each side are built bottom-up from the
//! interface Fresnel coefficients. The zero-frequency term uses limit forms
//! chosen by the static behaviour of each medium, so Drude and plasma
//! descriptions of the same material give the two standard prescriptions.

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::material::{DielectricFunction, Response, StaticLimit};
use crate::quadrature::{integrate, QuadratureSpec};
use crate::units::{BOLTZMANN_EV_PER_K, HBAR_C_EV_NM, JOULE_PER_EV, NM, PN, UM};

/// ξ_l = 2π k_B T l in eV.
pub fn matsubara_frequency(l: u32, t_k: f64) -> Result<f64> {
    if !(t_k > 0.0) || !t_k.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {t_k} K"
        )));
    }
    Ok(2.0 * std::f64::consts::PI * BOLTZMANN_EV_PER_K * t_k * f64::from(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarization {
    Tm,
    Te,
}

impl Polarization {
    pub const BOTH: [Polarization; 2] = [Polarization::Tm, Polarization::Te];
}

/// A medium at one (ξ, k⊥) point: its response and normal wave number q (eV).
#[derive(Debug, Clone, Copy)]
struct Medium {
    response: Response,
    q: f64,
}

impl Medium {
    fn new(response: Response, xi: f64, k: f64) -> Self {
        let q = match response {
            Response::Eps(e) => (k * k + e * xi * xi).sqrt(),
            Response::Static(s) if s.ideal => f64::INFINITY,
            Response::Static(s) => (k * k + s.screening).sqrt(),
            Response::Ideal => f64::INFINITY,
        };
        Self { response, q }
    }

    fn is_ideal(&self) -> bool {
        matches!(
            self.response,
            Response::Ideal | Response::Static(StaticLimit { ideal: true, .. })
        )
    }

    fn static_limit(&self) -> StaticLimit {
        match self.response {
            Response::Eps(e) => StaticLimit::finite(e),
            Response::Static(s) => s,
            Response::Ideal => StaticLimit {
                order: u8::MAX,
                coeff: 1.0,
                screening: f64::INFINITY,
                ideal: true,
            },
        }
    }
}

/// Interface coefficient for a wave in medium `a` reflected by medium `b`.
fn interface(pol: Polarization, a: &Medium, b: &Medium) -> f64 {
    match (a.is_ideal(), b.is_ideal()) {
        (true, true) => return 0.0,
        (false, true) => {
            return match pol {
                Polarization::Tm => 1.0,
                Polarization::Te => -1.0,
            }
        }
        (true, false) => {
            return match pol {
                Polarization::Tm => -1.0,
                Polarization::Te => 1.0,
            }
        }
        (false, false) => {}
    }
    match pol {
        Polarization::Te => {
            let sum = a.q + b.q;
            if sum == 0.0 {
                0.0
            } else {
                (a.q - b.q) / sum
            }
        }
        Polarization::Tm => match (a.response, b.response) {
            (Response::Eps(ea), Response::Eps(eb)) => {
                let num = eb * a.q - ea * b.q;
                let den = eb * a.q + ea * b.q;
                if den == 0.0 {
                    (eb - ea) / (eb + ea)
                } else {
                    num / den
                }
            }
            _ => {
                let (sa, sb) = (a.static_limit(), b.static_limit());
                if sb.order > sa.order {
                    1.0
                } else if sa.order > sb.order {
                    -1.0
                } else {
                    let den = sb.coeff * a.q + sa.coeff * b.q;
                    if den == 0.0 {
                        (sb.coeff - sa.coeff) / (sb.coeff + sa.coeff)
                    } else {
                        (sb.coeff * a.q - sa.coeff * b.q) / den
                    }
                }
            }
        },
    }
}

/// Fresnel coefficient at the interface between media `a` and `b` on the
/// imaginary frequency axis. `k_perp` is ħc·k⊥ in eV. At ξ = 0 the media
/// should be given as [`Response::Static`].
pub fn fresnel_r(
    pol: Polarization,
    xi: f64,
    k_perp: f64,
    eps_a: &Response,
    eps_b: &Response,
) -> f64 {
    let a = Medium::new(*eps_a, xi, k_perp);
    let b = Medium::new(*eps_b, xi, k_perp);
    interface(pol, &a, &b)
}

/// Layer thickness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Thickness {
    Finite { nm: f64 },
    SemiInfinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub permittivity: DielectricFunction,
    pub thickness: Thickness,
}

impl Layer {
    pub fn half_space(permittivity: DielectricFunction) -> Self {
        Self {
            permittivity,
            thickness: Thickness::SemiInfinite,
        }
    }

    pub fn film(permittivity: DielectricFunction, nm: f64) -> Self {
        Self {
            permittivity,
            thickness: Thickness::Finite { nm },
        }
    }
}

fn validate_side(layers: &[Layer], side: &str) -> Result<()> {
    let (last, films) = layers
        .split_last()
        .ok_or_else(|| Error::invalid(format!("{side} side of the stack has no layers")))?;
    if last.thickness != Thickness::SemiInfinite {
        return Err(Error::invalid(format!(
            "{side} side must end in a semi-infinite layer"
        )));
    }
    for l in films {
        match l.thickness {
            Thickness::Finite { nm } if nm > 0.0 && nm.is_finite() => {}
            Thickness::Finite { nm } => {
                return Err(Error::invalid(format!(
                    "{side} film thickness must be positive, got {nm} nm"
                )))
            }
            Thickness::SemiInfinite => {
                return Err(Error::invalid(format!(
                    "only the outermost {side} layer may be semi-infinite"
                )))
            }
        }
    }
    layers.iter().try_for_each(|l| l.permittivity.validate())
}

/// Planar system: upper layers, a vacuum gap and lower layers. Both layer
/// lists are ordered from the gap outward.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub upper: Vec<Layer>,
    pub gap_nm: f64,
    pub lower: Vec<Layer>,
}

impl LayerStack {
    pub fn new(upper: Vec<Layer>, gap_nm: f64, lower: Vec<Layer>) -> Result<Self> {
        let s = Self {
            upper,
            gap_nm,
            lower,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gap_nm > 0.0) || !self.gap_nm.is_finite() {
            return Err(Error::invalid(format!(
                "gap must be positive, got {} nm",
                self.gap_nm
            )));
        }
        validate_side(&self.upper, "upper")?;
        validate_side(&self.lower, "lower")
    }

    pub fn with_gap(&self, gap_nm: f64) -> Self {
        Self {
            gap_nm,
            ..self.clone()
        }
    }
}

/// Media of one side at a fixed ξ, with film thicknesses.
struct SideAtXi {
    responses: Vec<Response>,
    thickness_nm: Vec<Option<f64>>,
}

impl SideAtXi {
    fn new(layers: &[Layer], xi: f64) -> Result<Self> {
        let responses = layers
            .iter()
            .map(|l| l.permittivity.response(xi))
            .collect::<Result<Vec<_>>>()?;
        let thickness_nm = layers
            .iter()
            .map(|l| match l.thickness {
                Thickness::Finite { nm } => Some(nm),
                Thickness::SemiInfinite => None,
            })
            .collect();
        Ok(Self {
            responses,
            thickness_nm,
        })
    }

    /// Reflection coefficient seen from the vacuum gap.
    fn reflection(&self, pol: Polarization, xi: f64, k: f64) -> f64 {
        let n = self.responses.len();
        let medium = |j: usize| {
            if j == 0 {
                Medium::new(Response::VACUUM, xi, k)
            } else {
                Medium::new(self.responses[j - 1], xi, k)
            }
        };
        // Media 0..=n with 0 the gap; medium j ≥ 1 is layer j − 1.
        let mut below = medium(n);
        let mut above = medium(n - 1);
        let mut r = interface(pol, &above, &below);
        for j in (1..n).rev() {
            below = above;
            above = medium(j - 1);
            let r_top = interface(pol, &above, &below);
            let d = self.thickness_nm[j - 1].expect("inner layers are finite");
            let phase = if below.q.is_finite() {
                (-2.0 * below.q * d / HBAR_C_EV_NM).exp()
            } else {
                0.0
            };
            r = (r_top + r * phase) / (1.0 + r_top * r * phase);
        }
        r
    }
}

/// Reflection coefficient of a layer sequence (ordered from the vacuum side
/// outward) as seen from vacuum.
pub fn stack_reflection(pol: Polarization, xi: f64, k_perp: f64, layers: &[Layer]) -> Result<f64> {
    validate_side(layers, "reflecting")?;
    Ok(SideAtXi::new(layers, xi)?.reflection(pol, xi, k_perp))
}

/// When to stop the Matsubara sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    /// Stop once the estimated remainder falls below this fraction of the
    /// accumulated sum for three consecutive terms.
    Tolerance(f64),
    /// Sum l = 0 ..= l_max.
    MaxIndex(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatsubaraSpec {
    pub temperature_k: f64,
    pub truncation: Truncation,
    /// Hard cap on the number of terms for tolerance-driven truncation.
    pub max_terms: u32,
}

impl Default for MatsubaraSpec {
    fn default() -> Self {
        Self {
            temperature_k: crate::units::LAB_TEMPERATURE_K,
            truncation: Truncation::Tolerance(1e-7),
            max_terms: 500_000,
        }
    }
}

impl MatsubaraSpec {
    pub fn at_temperature(temperature_k: f64) -> Self {
        Self {
            temperature_k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature_k > 0.0) || !self.temperature_k.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {} K",
                self.temperature_k
            )));
        }
        if let Truncation::Tolerance(tol) = self.truncation {
            if !(tol > 0.0 && tol <= 1e-2) {
                return Err(Error::invalid(format!(
                    "Matsubara tolerance must lie in (0, 1e-2], got {tol}"
                )));
            }
        }
        if self.max_terms == 0 {
            return Err(Error::invalid("max_terms must be at least 1"));
        }
        Ok(())
    }
}

/// Result of a Matsubara summation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeEnergy {
    /// Energy per unit area in J/m².
    pub energy_j_per_m2: f64,
    /// Number of Matsubara terms summed (l = 0 included).
    pub terms: u32,
    /// Estimated relative size of the omitted remainder.
    pub tail_estimate: f64,
}

/// Dimensionless k⊥ integral of one Matsubara term.
fn matsubara_integral(
    up: &SideAtXi,
    down: &SideAtXi,
    xi: f64,
    a_nm: f64,
    quad: &QuadratureSpec,
) -> Result<f64> {
    let y_l = 2.0 * xi * a_nm / HBAR_C_EV_NM;
    let integrand = |t: f64| {
        let y = y_l + t;
        let q0 = y * HBAR_C_EV_NM / (2.0 * a_nm);
        let k = (q0 * q0 - xi * xi).max(0.0).sqrt();
        let decay = (-y).exp();
        let mut s = 0.0;
        for pol in Polarization::BOTH {
            let rr = up.reflection(pol, xi, k) * down.reflection(pol, xi, k);
            s += (-rr * decay).ln_1p();
        }
        y * s
    };

    let mut total: f64 = 0.0;
    let mut lo = 0.0;
    let mut width = 0.5;
    loop {
        let hi = lo + width;
        let spec = QuadratureSpec {
            abs_tol: quad.abs_tol.max(0.1 * quad.rel_tol * total.abs()),
            ..*quad
        };
        let est = integrate(integrand, lo, hi, &spec)?;
        total += est.value;
        lo = hi;
        if lo >= 1.0 {
            width *= 2.0;
        }
        if (est.value.abs() <= 1e-3 * quad.rel_tol * total.abs() && lo >= 4.0) || y_l + lo > 700.0 {
            break;
        }
        if est.value == 0.0 && total == 0.0 && lo >= 4.0 {
            break;
        }
    }
    // Beyond the last panel the integrand decays like y e^{−y}.
    let y_end = y_l + lo;
    let f_end = integrand(lo);
    total += f_end * (1.0 + 1.0 / y_end);
    Ok(total)
}

/// Plane-plane Lifshitz free energy per unit area with summation details.
pub fn free_energy_details(
    stack: &LayerStack,
    spec: &MatsubaraSpec,
    quad: &QuadratureSpec,
) -> Result<FreeEnergy> {
    stack.validate()?;
    spec.validate()?;
    quad.validate()?;
    let a_nm = stack.gap_nm;
    let t = spec.temperature_k;
    let term = |l: u32| -> Result<f64> {
        let xi = matsubara_frequency(l, t)?;
        let up = SideAtXi::new(&stack.upper, xi)?;
        let down = SideAtXi::new(&stack.lower, xi)?;
        let weight = if l == 0 { 0.5 } else { 1.0 };
        Ok(weight * matsubara_integral(&up, &down, xi, a_nm, quad)?)
    };

    let (sum, terms, tail) = match spec.truncation {
        Truncation::MaxIndex(l_max) => {
            let values = (0..=l_max)
                .into_par_iter()
                .map(term)
                .collect::<Result<Vec<_>>>()?;
            (values.iter().sum::<f64>(), l_max + 1, f64::NAN)
        }
        Truncation::Tolerance(tol) => sum_until_converged(&term, tol, spec.max_terms)?,
    };
    let kt_joule = BOLTZMANN_EV_PER_K * t * JOULE_PER_EV;
    let a_m = a_nm * NM;
    Ok(FreeEnergy {
        energy_j_per_m2: kt_joule / (2.0 * std::f64::consts::PI) / (4.0 * a_m * a_m) * sum,
        terms,
        tail_estimate: tail,
    })
}

/// Sums terms in parallel batches, stopping on the three-consecutive rule
/// with a geometric remainder estimate |term|·ρ/(1 − ρ).
fn sum_until_converged(
    term: &(dyn Fn(u32) -> Result<f64> + Sync),
    tol: f64,
    max_terms: u32,
) -> Result<(f64, u32, f64)> {
    const BATCH: u32 = 64;
    let mut sum = 0.0;
    let mut prev: Option<f64> = None;
    let mut quiet = 0;
    let mut l = 0u32;
    let mut last_bound = f64::INFINITY;
    while l < max_terms {
        let end = (l + BATCH).min(max_terms);
        let batch = (l..end)
            .into_par_iter()
            .map(term)
            .collect::<Result<Vec<_>>>()?;
        for v in batch {
            sum += v;
            l += 1;
            let bound = match prev {
                Some(p) if p != 0.0 => {
                    let rho = (v / p).abs();
                    if rho < 1.0 {
                        v.abs() * (rho / (1.0 - rho)).max(1.0)
                    } else {
                        f64::INFINITY
                    }
                }
                _ => {
                    if v == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                }
            };
            prev = Some(v);
            last_bound = bound;
            if bound <= tol * sum.abs() {
                quiet += 1;
                if quiet >= 3 {
                    let rel = if sum != 0.0 { bound / sum.abs() } else { 0.0 };
                    return Ok((sum, l, rel));
                }
            } else {
                quiet = 0;
            }
        }
    }
    Err(Error::NonConvergence {
        what: "Matsubara summation",
        iterations: l as usize,
        estimate: sum,
        error: last_bound,
    })
}

/// Plane-plane Lifshitz free energy per unit area in J/m².
pub fn free_energy_per_area(
    stack: &LayerStack,
    spec: &MatsubaraSpec,
    quad: &QuadratureSpec,
) -> Result<f64> {
    Ok(free_energy_details(stack, spec, quad)?.energy_j_per_m2)
}

/// Whether a/R is small enough for the proximity-force approximation to be
/// trusted at the 1% level.
pub fn pfa_is_accurate(a_nm: f64, radius_um: f64) -> bool {
    a_nm * NM / (radius_um * UM) <= 0.01
}

/// Sphere-plate force F = 2πR·E(a) in pN (attraction negative).
pub fn pfa_sphere_plate_force(
    stack: &LayerStack,
    radius_um: f64,
    spec: &MatsubaraSpec,
    quad: &QuadratureSpec,
) -> Result<f64> {
    if !(radius_um > 0.0) || !radius_um.is_finite() {
        return Err(Error::invalid(format!(
            "sphere radius must be positive, got {radius_um} µm"
        )));
    }
    if !pfa_is_accurate(stack.gap_nm, radius_um) {
        log::warn!(
            "a/R = {:.3e} exceeds 0.01; the proximity-force approximation loses accuracy",
            stack.gap_nm * NM / (radius_um * UM)
        );
    }
    let e = free_energy_per_area(stack, spec, quad)?;
    Ok(2.0 * std::f64::consts::PI * radius_um * UM * e / PN)
}

/// One row of a force table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForcePoint {
    pub a_nm: f64,
    pub f_lower_pn: f64,
    pub f_upper_pn: f64,
}

impl ForcePoint {
    pub fn band(&self) -> (f64, f64) {
        (
            self.f_lower_pn.min(self.f_upper_pn),
            self.f_lower_pn.max(self.f_upper_pn),
        )
    }
}

/// Forces for the lower- and upper-band stacks at each separation. The gap of
/// the template stacks is replaced by each separation.
pub fn force_curve(
    lower: &LayerStack,
    upper: &LayerStack,
    radius_um: f64,
    separations_nm: &[f64],
    spec: &MatsubaraSpec,
    quad: &QuadratureSpec,
) -> Result<Vec<ForcePoint>> {
    if separations_nm.is_empty() {
        return Err(Error::invalid("no separations requested"));
    }
    if separations_nm.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("separations must be strictly ascending"));
    }
    let jobs: Vec<(usize, bool)> = (0..separations_nm.len())
        .flat_map(|i| [(i, false), (i, true)])
        .collect();
    let forces = jobs
        .par_iter()
        .map(|&(i, is_upper)| {
            let template = if is_upper { upper } else { lower };
            pfa_sphere_plate_force(&template.with_gap(separations_nm[i]), radius_um, spec, quad)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(separations_nm
        .iter()
        .enumerate()
        .map(|(i, &a)| ForcePoint {
            a_nm: a,
            f_lower_pn: forces[2 * i],
            f_upper_pn: forces[2 * i + 1],
        })
        .collect())
}

/// Writes `a_nm,f_lower_pn,f_upper_pn`.
pub fn write_force_csv<W: std::io::Write>(writer: W, points: &[ForcePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["a_nm", "f_lower_pn", "f_upper_pn"])
        .map_err(|e| Error::csv("force output", e))?;
    for p in points {
        w.write_record([
            format!("{}", p.a_nm),
            format!("{:.9e}", p.f_lower_pn),
            format!("{:.9e}", p.f_upper_pn),
        ])
        .map_err(|e| Error::csv("force output", e))?;
    }
    w.flush().map_err(|e| Error::io("force output", e))?;
    Ok(())
}

pub fn read_force_csv<R: Read>(reader: R, origin: &str) -> Result<Vec<ForcePoint>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::csv(origin, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["a_nm", "f_lower_pn", "f_upper_pn"] {
        return Err(Error::data(format!(
            "{origin}: expected header `a_nm,f_lower_pn,f_upper_pn`"
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(origin, e))?;
        let v = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::data(format!("{origin}: row {}: {e}", i + 1)))?;
        out.push(ForcePoint {
            a_nm: v[0],
            f_lower_pn: v[1],
            f_upper_pn: v[2],
        });
    }
    if out.is_empty() {
        return Err(Error::data(format!("{origin}: no force rows")));
    }
    Ok(out)
}

pub fn read_force_csv_path(path: impl AsRef<Path>) -> Result<Vec<ForcePoint>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_force_csv(f, &path.display().to_string())
}
