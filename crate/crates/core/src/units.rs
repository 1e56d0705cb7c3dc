//! Physical constants (CODATA 2018) and the unit conventions of the crate.
//!
//! Spectral quantities are energies ħω in eV, wave numbers are carried as
//! ħc·k in eV, lengths in nm. SI only appears when forming energies per area
//! and forces.

/// ħc in eV·nm.
pub const HBAR_C_EV_NM: f64 = 197.326_980_4;

/// Boltzmann constant in eV/K.
pub const BOLTZMANN_EV_PER_K: f64 = 8.617_333_262e-5;

/// Joules per electronvolt.
pub const JOULE_PER_EV: f64 = 1.602_176_634e-19;

/// Vacuum permittivity in F/m.
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

/// ħc in J·m.
pub const HBAR_C_J_M: f64 = HBAR_C_EV_NM * JOULE_PER_EV * 1e-9;

pub const NM: f64 = 1e-9;
pub const UM: f64 = 1e-6;
pub const PN: f64 = 1e-12;

/// 0 °C in kelvin.
pub const ZERO_CELSIUS_K: f64 = 273.15;

/// Laboratory temperature used for the ITO measurements (2 °C).
pub const LAB_TEMPERATURE_K: f64 = ZERO_CELSIUS_K + 2.0;
