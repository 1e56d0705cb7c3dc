//! Closed-form dielectric permittivity models.
//!
//! Every model can be evaluated on the imaginary frequency axis, where ε(iξ)
//! is real and at least one. The absorptive models (Drude, oscillator) also
//! expose Im ε(ω) on the real axis, which is what the Kramers–Kronig
//! machinery integrates.
//!
//! Composite media are a list of terms whose ε(iξ) − 1 contributions add, so
//! switching free carriers on or off is a list edit.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kramers_kronig::PermittivityCurve;

/// Drude free-carrier model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrudeParams {
    /// Plasma frequency ω_p in eV.
    pub omega_p: f64,
    /// Relaxation parameter γ in eV.
    pub gamma: f64,
}

/// Dissipationless (plasma) limit of the Drude model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlasmaParams {
    pub omega_p: f64,
}

/// Single Lorentz oscillator, Im ε(ω) = g₀γ₀ω / ((ω² − ω₀²)² + γ₀²ω²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscillatorParams {
    /// Oscillator strength g₀ in eV².
    pub g0: f64,
    /// Width γ₀ in eV.
    pub gamma0: f64,
    /// Resonance frequency ω₀ in eV.
    pub omega0: f64,
}

/// Two-term Ninham–Parsegian representation of a dielectric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NinhamParsegianParams {
    pub c_ir: f64,
    pub c_uv: f64,
    pub omega_ir: f64,
    pub omega_uv: f64,
}

fn positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{name} must be positive and finite, got {value}"
        )))
    }
}

impl DrudeParams {
    pub fn new(omega_p: f64, gamma: f64) -> Result<Self> {
        let p = Self { omega_p, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        positive("Drude plasma frequency", self.omega_p)?;
        positive("Drude relaxation parameter", self.gamma)
    }
}

impl PlasmaParams {
    pub fn new(omega_p: f64) -> Result<Self> {
        let p = Self { omega_p };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        positive("plasma frequency", self.omega_p)
    }
}

impl OscillatorParams {
    pub fn new(g0: f64, gamma0: f64, omega0: f64) -> Result<Self> {
        let p = Self { g0, gamma0, omega0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        positive("oscillator strength", self.g0)?;
        positive("oscillator width", self.gamma0)?;
        positive("oscillator resonance", self.omega0)
    }
}

impl NinhamParsegianParams {
    pub fn new(c_ir: f64, c_uv: f64, omega_ir: f64, omega_uv: f64) -> Result<Self> {
        let p = Self {
            c_ir,
            c_uv,
            omega_ir,
            omega_uv,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        positive("C_IR", self.c_ir)?;
        positive("C_UV", self.c_uv)?;
        positive("omega_IR", self.omega_ir)?;
        positive("omega_UV", self.omega_uv)
    }
}

/// Im ε(ω) of the Drude model. Diverges as ω → 0.
pub fn drude_im_eps(p: &DrudeParams, omega: f64) -> Result<f64> {
    if !(omega > 0.0) {
        return Err(Error::Domain {
            model: "Drude Im eps",
            value: omega,
            reason: "requires omega > 0",
        });
    }
    Ok(p.omega_p * p.omega_p * p.gamma / (omega * (omega * omega + p.gamma * p.gamma)))
}

/// ε(iξ) = 1 + ω_p²/(ξ(ξ + γ)).
pub fn drude_eps_imag_axis(p: &DrudeParams, xi: f64) -> Result<f64> {
    if !(xi > 0.0) {
        return Err(Error::Domain {
            model: "Drude eps(i xi)",
            value: xi,
            reason: "diverges at xi = 0",
        });
    }
    Ok(1.0 + p.omega_p * p.omega_p / (xi * (xi + p.gamma)))
}

/// ε(iξ) = 1 + ω_p²/ξ².
pub fn plasma_eps_imag_axis(p: &PlasmaParams, xi: f64) -> Result<f64> {
    if !(xi > 0.0) {
        return Err(Error::Domain {
            model: "plasma eps(i xi)",
            value: xi,
            reason: "diverges at xi = 0",
        });
    }
    Ok(1.0 + (p.omega_p / xi).powi(2))
}

pub fn oscillator_im_eps(p: &OscillatorParams, omega: f64) -> f64 {
    let detune = omega * omega - p.omega0 * p.omega0;
    p.g0 * p.gamma0 * omega / (detune * detune + p.gamma0 * p.gamma0 * omega * omega)
}

pub fn oscillator_eps_imag_axis(p: &OscillatorParams, xi: f64) -> f64 {
    1.0 + p.g0 / (p.omega0 * p.omega0 + xi * xi + p.gamma0 * xi)
}

pub fn ninham_parsegian_eps(p: &NinhamParsegianParams, xi: f64) -> f64 {
    1.0 + p.c_ir / (1.0 + (xi / p.omega_ir).powi(2)) + p.c_uv / (1.0 + (xi / p.omega_uv).powi(2))
}

/// Real-axis absorption model used for extrapolating optical data.
#[derive(Debug, Clone, PartialEq)]
pub enum Absorption {
    Drude(DrudeParams),
    Oscillator(OscillatorParams),
    /// Sum of oscillators (e.g. interband transitions of a metal).
    Oscillators(Vec<OscillatorParams>),
    /// No absorption.
    None,
}

impl Absorption {
    /// Im ε(ω) for ω > 0.
    pub fn im_eps(&self, omega: f64) -> Result<f64> {
        match self {
            Absorption::Drude(p) => drude_im_eps(p, omega),
            Absorption::Oscillator(p) => Ok(oscillator_im_eps(p, omega)),
            Absorption::Oscillators(ps) => Ok(ps.iter().map(|p| oscillator_im_eps(p, omega)).sum()),
            Absorption::None => Ok(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Absorption::Drude(p) => p.validate(),
            Absorption::Oscillator(p) => p.validate(),
            Absorption::Oscillators(ps) => ps.iter().try_for_each(|p| p.validate()),
            Absorption::None => Ok(()),
        }
    }
}

/// How ε(iξ) behaves as ξ → 0: ε ≈ `coeff` / ξ^`order`.
///
/// Order 0 is a finite static permittivity, 1 the Drude pole and 2 the
/// plasma pole. `screening` is the plasma contribution κ² (eV²) to the
/// zero-frequency TE wave vector q² = k⊥² + κ², non-zero only for plasma
/// media. `ideal` marks a perfect conductor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticLimit {
    pub order: u8,
    pub coeff: f64,
    pub screening: f64,
    pub ideal: bool,
}

impl StaticLimit {
    pub fn finite(eps0: f64) -> Self {
        Self {
            order: 0,
            coeff: eps0,
            screening: 0.0,
            ideal: false,
        }
    }

    pub const VACUUM: StaticLimit = StaticLimit {
        order: 0,
        coeff: 1.0,
        screening: 0.0,
        ideal: false,
    };
}

/// The response of one medium at a single imaginary frequency, as consumed by
/// the reflection formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Response {
    /// ε(iξ) at ξ > 0.
    Eps(f64),
    /// ξ = 0 limit.
    Static(StaticLimit),
    /// Perfect conductor at ξ > 0.
    Ideal,
}

impl Response {
    pub const VACUUM: Response = Response::Eps(1.0);
}

/// A permittivity model evaluable on the imaginary frequency axis.
#[derive(Debug, Clone, PartialEq)]
pub enum DielectricFunction {
    Vacuum,
    /// Perfect conductor: |r| = 1 for both polarizations.
    IdealMetal,
    Drude(DrudeParams),
    Plasma(PlasmaParams),
    Oscillator(OscillatorParams),
    NinhamParsegian(NinhamParsegianParams),
    /// ε(iξ) sampled on a grid (e.g. from a Kramers–Kronig transform).
    Curve(Arc<PermittivityCurve>),
    /// Terms whose ε − 1 contributions add.
    Composite(Vec<DielectricFunction>),
}

impl DielectricFunction {
    pub fn composite(terms: impl IntoIterator<Item = DielectricFunction>) -> Self {
        DielectricFunction::Composite(terms.into_iter().collect())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DielectricFunction::Vacuum
            | DielectricFunction::IdealMetal
            | DielectricFunction::Curve(_) => Ok(()),
            DielectricFunction::Drude(p) => p.validate(),
            DielectricFunction::Plasma(p) => p.validate(),
            DielectricFunction::Oscillator(p) => p.validate(),
            DielectricFunction::NinhamParsegian(p) => p.validate(),
            DielectricFunction::Composite(terms) => {
                if terms
                    .iter()
                    .any(|t| matches!(t, DielectricFunction::IdealMetal))
                {
                    return Err(Error::invalid(
                        "an ideal metal cannot be part of a composite permittivity",
                    ));
                }
                terms.iter().try_for_each(|t| t.validate())
            }
        }
    }

    /// ε(iξ). Fails at ξ = 0 for media with a zero-frequency pole; use
    /// [`DielectricFunction::static_limit`] there.
    pub fn eps_imag_axis(&self, xi: f64) -> Result<f64> {
        if !(xi >= 0.0) || !xi.is_finite() {
            return Err(Error::Domain {
                model: "eps(i xi)",
                value: xi,
                reason: "requires finite xi >= 0",
            });
        }
        Ok(1.0 + self.susceptibility(xi)?)
    }

    /// ε(iξ) − 1.
    fn susceptibility(&self, xi: f64) -> Result<f64> {
        Ok(match self {
            DielectricFunction::Vacuum => 0.0,
            DielectricFunction::IdealMetal => {
                return Err(Error::Domain {
                    model: "ideal metal",
                    value: xi,
                    reason: "permittivity is infinite",
                })
            }
            DielectricFunction::Drude(p) => drude_eps_imag_axis(p, xi)? - 1.0,
            DielectricFunction::Plasma(p) => plasma_eps_imag_axis(p, xi)? - 1.0,
            DielectricFunction::Oscillator(p) => oscillator_eps_imag_axis(p, xi) - 1.0,
            DielectricFunction::NinhamParsegian(p) => ninham_parsegian_eps(p, xi) - 1.0,
            DielectricFunction::Curve(c) => c.eval(xi) - 1.0,
            DielectricFunction::Composite(terms) => {
                let mut sum = 0.0;
                for t in terms {
                    sum += t.susceptibility(xi)?;
                }
                sum
            }
        })
    }

    /// Zero-frequency behaviour used by the l = 0 Matsubara term.
    pub fn static_limit(&self) -> StaticLimit {
        match self {
            DielectricFunction::Vacuum => StaticLimit::VACUUM,
            DielectricFunction::IdealMetal => StaticLimit {
                order: u8::MAX,
                coeff: 1.0,
                screening: f64::INFINITY,
                ideal: true,
            },
            DielectricFunction::Drude(p) => StaticLimit {
                order: 1,
                coeff: p.omega_p * p.omega_p / p.gamma,
                screening: 0.0,
                ideal: false,
            },
            DielectricFunction::Plasma(p) => StaticLimit {
                order: 2,
                coeff: p.omega_p * p.omega_p,
                screening: p.omega_p * p.omega_p,
                ideal: false,
            },
            DielectricFunction::Oscillator(p) => {
                StaticLimit::finite(oscillator_eps_imag_axis(p, 0.0))
            }
            DielectricFunction::NinhamParsegian(p) => {
                StaticLimit::finite(ninham_parsegian_eps(p, 0.0))
            }
            DielectricFunction::Curve(c) => StaticLimit::finite(c.static_value()),
            DielectricFunction::Composite(terms) => {
                let limits: Vec<StaticLimit> = terms.iter().map(|t| t.static_limit()).collect();
                let order = limits.iter().map(|l| l.order).max().unwrap_or(0);
                let screening = limits.iter().map(|l| l.screening).sum();
                let coeff = if order == 0 {
                    1.0 + limits.iter().map(|l| l.coeff - 1.0).sum::<f64>()
                } else {
                    limits
                        .iter()
                        .filter(|l| l.order == order)
                        .map(|l| l.coeff)
                        .sum()
                };
                StaticLimit {
                    order,
                    coeff,
                    screening,
                    ideal: false,
                }
            }
        }
    }

    /// The response at ξ, switching to the static limit at ξ = 0.
    pub fn response(&self, xi: f64) -> Result<Response> {
        if matches!(self, DielectricFunction::IdealMetal) {
            return Ok(if xi == 0.0 {
                Response::Static(self.static_limit())
            } else {
                Response::Ideal
            });
        }
        if xi == 0.0 {
            Ok(Response::Static(self.static_limit()))
        } else {
            Ok(Response::Eps(self.eps_imag_axis(xi)?))
        }
    }

    /// Removes every Drude and plasma term, leaving the bound-charge response.
    pub fn without_free_carriers(&self) -> DielectricFunction {
        match self {
            DielectricFunction::Drude(_) | DielectricFunction::Plasma(_) => {
                DielectricFunction::Vacuum
            }
            DielectricFunction::Composite(terms) => DielectricFunction::Composite(
                terms
                    .iter()
                    .filter(|t| {
                        !matches!(
                            t,
                            DielectricFunction::Drude(_) | DielectricFunction::Plasma(_)
                        )
                    })
                    .map(|t| t.without_free_carriers())
                    .collect(),
            ),
            other => other.clone(),
        }
    }
}
