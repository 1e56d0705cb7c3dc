//! Built-in parameters for the Au sphere above an ITO film on quartz.
//!
//! The measured ITO absorption spectra and the AFM roughness histograms are
//! not available as numbers, so the files shipped in `data/` are
//! reconstructions: Drude free carriers plus the averaged high-frequency
//! oscillators for Im ε, and Gaussian-core histograms tuned to the quoted
//! zero roughness levels. They are approximate inputs, not measurements.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kramers_kronig::{
    core_curve, ExtrapolationSpec, OpticalDataTable, PermittivityCurve, KK_REL_TOL,
};
use crate::lifshitz::{matsubara_frequency, Layer, LayerStack};
use crate::material::{
    Absorption, DielectricFunction, DrudeParams, NinhamParsegianParams, OscillatorParams,
    PlasmaParams,
};
use crate::quadrature::QuadratureSpec;
use crate::roughness::RoughnessProfile;
use crate::units::{HBAR_C_EV_NM, LAB_TEMPERATURE_K};

pub const SPHERE_RADIUS_UM: f64 = 101.2;
pub const ITO_THICKNESS_NM: f64 = 74.6;
pub const TEMPERATURE_K: f64 = LAB_TEMPERATURE_K;

/// Plasma frequencies used by the plasma-model prescription.
pub const AU_PLASMA_EV: f64 = 9.0;
pub const ITO_PLASMA_EV: f64 = 1.3;

const ITO_UNTREATED_TOP: &str = include_str!("../data/ito_untreated_top.csv");
const ITO_UV_TREATED_TOP: &str = include_str!("../data/ito_uv_treated_top.csv");
const ROUGHNESS_ITO: &str = include_str!("../data/roughness_ito.csv");
const ROUGHNESS_AU: &str = include_str!("../data/roughness_au.csv");

/// Which ITO sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Film {
    Untreated,
    UvTreated,
}

impl Film {
    pub fn label(self) -> &'static str {
        match self {
            Film::Untreated => "untreated",
            Film::UvTreated => "uv_treated",
        }
    }

    /// Free-carrier Drude parameters of the film.
    pub fn drude(self) -> DrudeParams {
        let gamma = match self {
            Film::Untreated => 0.128,
            Film::UvTreated => 0.132,
        };
        DrudeParams {
            omega_p: 1.5,
            gamma,
        }
    }

    /// High-frequency oscillators giving the (lower, upper) band.
    pub fn oscillators(self) -> (OscillatorParams, OscillatorParams) {
        match self {
            Film::Untreated => (
                OscillatorParams {
                    g0: 111.52,
                    gamma0: 4.0,
                    omega0: 8.0,
                },
                OscillatorParams {
                    g0: 240.54,
                    gamma0: 8.5,
                    omega0: 9.0,
                },
            ),
            Film::UvTreated => (
                OscillatorParams {
                    g0: 128.28,
                    gamma0: 4.5,
                    omega0: 8.8,
                },
                OscillatorParams {
                    g0: 280.28,
                    gamma0: 9.2,
                    omega0: 9.8,
                },
            ),
        }
    }

    /// Extrapolations of the measured range for the (lower, upper) band.
    pub fn extrapolations(self) -> (ExtrapolationSpec, ExtrapolationSpec) {
        let (lo, up) = self.oscillators();
        let low = Absorption::Drude(self.drude());
        (
            ExtrapolationSpec {
                low: low.clone(),
                high: Absorption::Oscillator(lo),
            },
            ExtrapolationSpec {
                low,
                high: Absorption::Oscillator(up),
            },
        )
    }

    /// The shipped top-surface Im ε table.
    pub fn table(self) -> Result<OpticalDataTable> {
        let (text, name) = match self {
            Film::Untreated => (ITO_UNTREATED_TOP, "ito_untreated_top.csv"),
            Film::UvTreated => (ITO_UV_TREATED_TOP, "ito_uv_treated_top.csv"),
        };
        OpticalDataTable::from_reader(text.as_bytes(), name)
    }
}

/// Treatment of the zero-frequency Matsubara term for the metals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prescription {
    Drude,
    Plasma,
}

/// Au: free carriers plus six interband oscillators.
pub fn gold(prescription: Prescription) -> DielectricFunction {
    let carriers = match prescription {
        Prescription::Drude => DielectricFunction::Drude(DrudeParams {
            omega_p: AU_PLASMA_EV,
            gamma: 0.035,
        }),
        Prescription::Plasma => DielectricFunction::Plasma(PlasmaParams {
            omega_p: AU_PLASMA_EV,
        }),
    };
    let oscillators = gold_oscillators()
        .into_iter()
        .map(DielectricFunction::Oscillator);
    DielectricFunction::composite(std::iter::once(carriers).chain(oscillators))
}

/// Interband oscillators (g₀ eV², γ₀ eV, ω₀ eV) for Au.
pub fn gold_oscillators() -> Vec<OscillatorParams> {
    [
        (7.091, 0.75, 3.05),
        (41.46, 1.85, 4.15),
        (2.7, 1.0, 5.4),
        (154.7, 7.0, 8.5),
        (44.55, 6.0, 13.5),
        (309.6, 9.0, 21.5),
    ]
    .into_iter()
    .map(|(g0, gamma0, omega0)| OscillatorParams { g0, gamma0, omega0 })
    .collect()
}

/// Quartz substrate.
pub fn quartz() -> NinhamParsegianParams {
    NinhamParsegianParams {
        c_ir: 1.93,
        c_uv: 1.359,
        omega_ir: 0.1378,
        omega_uv: 13.38,
    }
}

pub fn roughness_ito() -> Result<RoughnessProfile> {
    RoughnessProfile::from_reader(ROUGHNESS_ITO.as_bytes(), "roughness_ito.csv")
}

pub fn roughness_au() -> Result<RoughnessProfile> {
    RoughnessProfile::from_reader(ROUGHNESS_AU.as_bytes(), "roughness_au.csv")
}

/// ξ grid for a permittivity curve: a low anchor for the static value plus
/// every Matsubara frequency up to where the smallest separation no longer
/// contributes (2ξa/ħc ≈ 40).
pub fn matsubara_xi_grid(temperature_k: f64, a_min_nm: f64) -> Result<Vec<f64>> {
    if !(a_min_nm > 0.0) {
        return Err(Error::invalid(format!(
            "minimum separation must be positive, got {a_min_nm} nm"
        )));
    }
    let xi_max = 40.0 * HBAR_C_EV_NM / (2.0 * a_min_nm);
    let mut grid = vec![1e-4];
    let mut l = 1;
    loop {
        let xi = matsubara_frequency(l, temperature_k)?;
        if xi <= 1e-4 {
            l += 1;
            continue;
        }
        grid.push(xi);
        if xi > xi_max {
            break;
        }
        l += 1;
    }
    Ok(grid)
}

/// Carrier-free ε(iξ) of the film for the (lower, upper) band.
#[derive(Debug, Clone)]
pub struct ItoCore {
    pub film: Film,
    pub lower: Arc<PermittivityCurve>,
    pub upper: Arc<PermittivityCurve>,
}

impl ItoCore {
    /// Transforms `table` on `xi_grid` with the film's extrapolations.
    pub fn compute(film: Film, table: &OpticalDataTable, xi_grid: &[f64]) -> Result<Self> {
        let (lo, up) = film.extrapolations();
        let spec = QuadratureSpec::with_rel_tol(KK_REL_TOL);
        let label = |band: &str| format!("{}_carriers_off_{band}", film.label());
        Ok(Self {
            film,
            lower: Arc::new(core_curve(table, &lo, xi_grid, label("lower"), &spec)?),
            upper: Arc::new(core_curve(table, &up, xi_grid, label("upper"), &spec)?),
        })
    }

    /// ITO permittivity for one band: the core, plus the free carriers when
    /// `carriers_on` (Drude or plasma per the prescription).
    pub fn permittivity(
        &self,
        upper_band: bool,
        carriers_on: bool,
        prescription: Prescription,
    ) -> DielectricFunction {
        let core = DielectricFunction::Curve(if upper_band {
            self.upper.clone()
        } else {
            self.lower.clone()
        });
        if !carriers_on {
            return core;
        }
        let carriers = match prescription {
            Prescription::Drude => DielectricFunction::Drude(self.film.drude()),
            Prescription::Plasma => DielectricFunction::Plasma(PlasmaParams {
                omega_p: ITO_PLASMA_EV,
            }),
        };
        DielectricFunction::composite([core, carriers])
    }

    /// Au / vacuum / ITO film / quartz stacks for the (lower, upper) band at
    /// a nominal gap of 100 nm.
    pub fn stacks(
        &self,
        carriers_on: bool,
        prescription: Prescription,
    ) -> Result<(LayerStack, LayerStack)> {
        let build = |upper_band: bool| {
            LayerStack::new(
                vec![Layer::half_space(gold(prescription))],
                100.0,
                vec![
                    Layer::film(
                        self.permittivity(upper_band, carriers_on, prescription),
                        ITO_THICKNESS_NM,
                    ),
                    Layer::half_space(DielectricFunction::NinhamParsegian(quartz())),
                ],
            )
        };
        Ok((build(false)?, build(true)?))
    }
}
