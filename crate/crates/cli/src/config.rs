//! Run configuration: one TOML file with units in every key name.
//!
//! Relative paths are resolved against the directory of the file that
//! names them, so a resolved config can be rerun from anywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use casimir_core::lifshitz::{pfa_is_accurate, MatsubaraSpec, Truncation};
use casimir_core::quadrature::QuadratureSpec;
use casimir_core::reference::{self, Film, Prescription};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilmChoice {
    Untreated,
    UvTreated,
}

impl From<FilmChoice> for Film {
    fn from(f: FilmChoice) -> Self {
        match f {
            FilmChoice::Untreated => Film::Untreated,
            FilmChoice::UvTreated => Film::UvTreated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrescriptionChoice {
    Drude,
    Plasma,
}

impl From<PrescriptionChoice> for Prescription {
    fn from(p: PrescriptionChoice) -> Self {
        match p {
            PrescriptionChoice::Drude => Prescription::Drude,
            PrescriptionChoice::Plasma => Prescription::Plasma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CarriersChoice {
    On,
    Off,
    Both,
}

impl CarriersChoice {
    /// The carrier settings to evaluate, carriers on first.
    pub fn settings(self) -> Vec<bool> {
        match self {
            CarriersChoice::On => vec![true],
            CarriersChoice::Off => vec![false],
            CarriersChoice::Both => vec![true, false],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BandChoice {
    Lower,
    Upper,
    Both,
}

impl BandChoice {
    pub fn lower(self) -> bool {
        self != BandChoice::Upper
    }

    pub fn upper(self) -> bool {
        self != BandChoice::Lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackConfig {
    pub film: FilmChoice,
    pub ito_thickness_nm: f64,
    pub radius_um: f64,
    pub temperature_k: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            film: FilmChoice::Untreated,
            ito_thickness_nm: reference::ITO_THICKNESS_NM,
            radius_um: reference::SPHERE_RADIUS_UM,
            temperature_k: reference::TEMPERATURE_K,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PermittivityConfig {
    /// `omega_ev,im_eps` table; the film's shipped table when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optical_table: Option<PathBuf>,
    pub prescription: PrescriptionChoice,
    pub carriers: CarriersChoice,
    pub band: BandChoice,
}

impl Default for PermittivityConfig {
    fn default() -> Self {
        Self {
            optical_table: None,
            prescription: PrescriptionChoice::Drude,
            carriers: CarriersChoice::Both,
            band: BandChoice::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparationConfig {
    pub start_nm: f64,
    pub stop_nm: f64,
    pub step_nm: f64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            start_nm: 60.0,
            stop_nm: 150.0,
            step_nm: 1.0,
        }
    }
}

impl SeparationConfig {
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.stop_nm - self.start_nm) / self.step_nm + 1e-9).floor() as usize;
        (0..=n)
            .map(|i| self.start_nm + i as f64 * self.step_nm)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceConfig {
    pub matsubara_rel: f64,
    pub quadrature_rel: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self {
            matsubara_rel: 1e-7,
            quadrature_rel: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoughnessConfig {
    pub enabled: bool,
    /// `v,h_nm` histograms; the shipped profiles when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ito_profile: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub au_profile: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub initial_m_nm_per_v: f64,
    pub initial_z0_nm: f64,
    pub window_lo_nm: f64,
    pub window_hi_nm: f64,
    pub bin_step_nm: f64,
    pub drift_correction: bool,
    pub trend_tolerance_mv: f64,
    /// Range over which the electrostatic polynomial is fitted and certified.
    pub electrostatic_lo_nm: f64,
    pub electrostatic_hi_nm: f64,
    pub extract_lo_nm: f64,
    pub extract_hi_nm: f64,
    pub grid_step_nm: f64,
    pub noise_floor_pn: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            initial_m_nm_per_v: 100.0,
            initial_z0_nm: 30.0,
            window_lo_nm: 60.0,
            window_hi_nm: 600.0,
            bin_step_nm: 1.0,
            drift_correction: false,
            trend_tolerance_mv: 1.5,
            electrostatic_lo_nm: 40.0,
            electrostatic_hi_nm: 2500.0,
            extract_lo_nm: 60.0,
            extract_hi_nm: 600.0,
            grid_step_nm: 1.0,
            noise_floor_pn: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub v0_mv: f64,
    pub m_nm_per_v: f64,
    pub z0_nm: f64,
    pub k_tilde_nn_per_v: f64,
    pub drift_nm_per_curve: f64,
    /// |V − V₀| values; each is applied on both sides of V₀.
    pub offsets_mv: Vec<f64>,
    pub repetitions: u32,
    pub noise_pn: f64,
    pub seed: u64,
    pub z_step_nm: f64,
    pub a_min_nm: f64,
    pub a_max_nm: f64,
    pub v0_trend_mv_per_nm: f64,
    /// Casimir force as F(a) = law_force_at_80nm_pn · (80 nm / a)^law_exponent.
    pub law_force_at_80nm_pn: f64,
    pub law_exponent: f64,
    /// Theory table to use as the force law instead of the power law; the
    /// midpoint of the bands it contains is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub law_theory_csv: Option<PathBuf>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            v0_mv: -196.8,
            m_nm_per_v: 104.4,
            z0_nm: 29.6,
            k_tilde_nn_per_v: 1.51,
            drift_nm_per_curve: 0.0,
            offsets_mv: vec![12.0, 25.0, 40.0, 55.0, 68.0],
            repetitions: 10,
            noise_pn: 2.0,
            seed: 0,
            z_step_nm: 0.2,
            a_min_nm: 60.0,
            a_max_nm: 600.0,
            v0_trend_mv_per_nm: 0.0,
            law_force_at_80nm_pn: -143.7,
            law_exponent: 2.6,
            law_theory_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub stack: StackConfig,
    #[serde(default)]
    pub permittivity: PermittivityConfig,
    #[serde(default)]
    pub separation: SeparationConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
    #[serde(default)]
    pub roughness: RoughnessConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            stack: StackConfig::default(),
            permittivity: PermittivityConfig::default(),
            separation: SeparationConfig::default(),
            tolerances: ToleranceConfig::default(),
            roughness: RoughnessConfig::default(),
            calibration: CalibrationConfig::default(),
            synthesis: SynthesisConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "`{name}` must be positive, got {v}"
        )))
    }
}

fn ordered(lo_name: &str, lo: f64, hi_name: &str, hi: f64) -> Result<()> {
    if hi > lo {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "`{hi_name}` ({hi}) must exceed `{lo_name}` ({lo})"
        )))
    }
}

impl RunConfig {
    /// Parses TOML text; relative paths are taken relative to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        if base.as_os_str().is_empty() || base == Path::new(".") {
            return;
        }
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.permittivity.optical_table);
        fix(&mut self.roughness.ito_profile);
        fix(&mut self.roughness.au_profile);
        fix(&mut self.synthesis.law_theory_csv);
        if self.output.dir.is_relative() {
            self.output.dir = base.join(&self.output.dir);
        }
    }

    /// Checks ranges, tolerances and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let s = &self.stack;
        positive("stack.radius_um", s.radius_um)?;
        positive("stack.temperature_k", s.temperature_k)?;
        positive("stack.ito_thickness_nm", s.ito_thickness_nm)?;
        let g = &self.separation;
        positive("separation.start_nm", g.start_nm)?;
        positive("separation.step_nm", g.step_nm)?;
        ordered(
            "separation.start_nm",
            g.start_nm,
            "separation.stop_nm",
            g.stop_nm,
        )?;
        if !pfa_is_accurate(g.stop_nm, s.radius_um) {
            return Err(CliError::Config(format!(
                "separation.stop_nm = {} nm exceeds 1% of the sphere radius, where the \
                 proximity-force approximation is no longer reliable",
                g.stop_nm
            )));
        }
        if g.points().len() > 100_000 {
            return Err(CliError::Config(
                "separation grid has more than 100000 points".into(),
            ));
        }
        for (name, t) in [
            ("tolerances.matsubara_rel", self.tolerances.matsubara_rel),
            ("tolerances.quadrature_rel", self.tolerances.quadrature_rel),
        ] {
            positive(name, t)?;
            if t >= 0.1 {
                return Err(CliError::Config(format!(
                    "`{name}` must be below 0.1, got {t}"
                )));
            }
        }
        let c = &self.calibration;
        for (name, v) in [
            ("calibration.initial_m_nm_per_v", c.initial_m_nm_per_v),
            ("calibration.window_lo_nm", c.window_lo_nm),
            ("calibration.bin_step_nm", c.bin_step_nm),
            ("calibration.trend_tolerance_mv", c.trend_tolerance_mv),
            ("calibration.electrostatic_lo_nm", c.electrostatic_lo_nm),
            ("calibration.extract_lo_nm", c.extract_lo_nm),
            ("calibration.grid_step_nm", c.grid_step_nm),
        ] {
            positive(name, v)?;
        }
        if !(c.noise_floor_pn >= 0.0) {
            return Err(CliError::Config(
                "`calibration.noise_floor_pn` must not be negative".into(),
            ));
        }
        ordered(
            "calibration.window_lo_nm",
            c.window_lo_nm,
            "calibration.window_hi_nm",
            c.window_hi_nm,
        )?;
        ordered(
            "calibration.extract_lo_nm",
            c.extract_lo_nm,
            "calibration.extract_hi_nm",
            c.extract_hi_nm,
        )?;
        ordered(
            "calibration.electrostatic_lo_nm",
            c.electrostatic_lo_nm,
            "calibration.electrostatic_hi_nm",
            c.electrostatic_hi_nm,
        )?;
        let y = &self.synthesis;
        for (name, v) in [
            ("synthesis.m_nm_per_v", y.m_nm_per_v),
            ("synthesis.k_tilde_nn_per_v", y.k_tilde_nn_per_v),
            ("synthesis.z_step_nm", y.z_step_nm),
            ("synthesis.a_min_nm", y.a_min_nm),
            ("synthesis.law_exponent", y.law_exponent),
        ] {
            positive(name, v)?;
        }
        ordered(
            "synthesis.a_min_nm",
            y.a_min_nm,
            "synthesis.a_max_nm",
            y.a_max_nm,
        )?;
        if y.offsets_mv.is_empty() || y.offsets_mv.iter().any(|o| !(*o > 0.0)) {
            return Err(CliError::Config(
                "`synthesis.offsets_mv` needs one or more positive offsets".into(),
            ));
        }
        if y.repetitions == 0 || !(y.noise_pn >= 0.0) {
            return Err(CliError::Config(
                "`synthesis.repetitions` must be positive and `synthesis.noise_pn` not negative"
                    .into(),
            ));
        }
        for (name, path) in [
            (
                "permittivity.optical_table",
                &self.permittivity.optical_table,
            ),
            ("roughness.ito_profile", &self.roughness.ito_profile),
            ("roughness.au_profile", &self.roughness.au_profile),
            ("synthesis.law_theory_csv", &self.synthesis.law_theory_csv),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(CliError::Config(format!(
                        "`{name}` refers to {}, which does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn matsubara(&self) -> MatsubaraSpec {
        MatsubaraSpec {
            temperature_k: self.stack.temperature_k,
            truncation: Truncation::Tolerance(self.tolerances.matsubara_rel),
            ..MatsubaraSpec::default()
        }
    }

    pub fn quadrature(&self) -> QuadratureSpec {
        QuadratureSpec::with_rel_tol(self.tolerances.quadrature_rel)
    }
}
