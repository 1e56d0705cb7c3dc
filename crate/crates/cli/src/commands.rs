//! The subcommands. Each computes its outputs in memory; nothing reaches
//! the disk until [`write_run`] is given the finished artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use casimir_core::calibration::{
    error_budget, extract_casimir, fit_calibration, load_curve_dir, read_budget_csv,
    symmetric_voltages, synthesize_curves, write_budget_csv, CalibrationFit, CalibrationParams,
    FitOptions, SynthesisSpec, SystematicSpec,
};
use casimir_core::electrostatics::{fit_polynomial_x, PolynomialX};
use casimir_core::kramers_kronig::{
    first_matsubara_ratio, write_curves_csv, OpticalDataTable, PermittivityCurve,
};
use casimir_core::lifshitz::{pfa_sphere_plate_force, Layer, LayerStack};
use casimir_core::material::DielectricFunction;
use casimir_core::reference::{
    gold, matsubara_xi_grid, quartz, roughness_au, roughness_ito, Film, ItoCore, Prescription,
};
use casimir_core::roughness::{
    min_effective_separation, rough_force, zero_roughness_level, RoughnessProfile, SmoothForceTable,
};

use crate::compare::compare;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::table::{ForceLaw, TheoryTable};

/// Files of one run, relative to the run directory, plus a text summary.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Artifacts {
    pub files: Vec<(PathBuf, Vec<u8>)>,
    pub summary: String,
}

impl Artifacts {
    fn add(&mut self, name: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files
            .iter()
            .find(|(p, _)| p == Path::new(name))
            .map(|(_, b)| b.as_slice())
    }
}

fn carriers_label(on: bool) -> &'static str {
    if on {
        "carriers_on"
    } else {
        "carriers_off"
    }
}

struct Theory {
    film: Film,
    prescription: Prescription,
    grid: Vec<f64>,
    core: ItoCore,
    roughness: Option<(RoughnessProfile, RoughnessProfile)>,
    /// Smallest separation any part of the surfaces reaches.
    a_min_nm: f64,
}

fn load_profile(
    path: &Option<PathBuf>,
    shipped: fn() -> casimir_core::Result<RoughnessProfile>,
) -> Result<RoughnessProfile> {
    Ok(match path {
        Some(p) => {
            let f = std::fs::File::open(p).map_err(|e| CliError::io(p, e))?;
            RoughnessProfile::from_reader(f, &p.display().to_string())?
        }
        None => shipped()?,
    })
}

fn prepare_theory(cfg: &RunConfig) -> Result<Theory> {
    cfg.validate()?;
    let film: Film = cfg.stack.film.into();
    let table = match &cfg.permittivity.optical_table {
        Some(p) => OpticalDataTable::from_csv_path(p)?,
        None => film.table()?,
    };
    let start = cfg.separation.start_nm;
    let roughness = if cfg.roughness.enabled {
        Some((
            load_profile(&cfg.roughness.ito_profile, roughness_ito)?,
            load_profile(&cfg.roughness.au_profile, roughness_au)?,
        ))
    } else {
        None
    };
    let a_min_nm = match &roughness {
        Some((ito, au)) => min_effective_separation(ito, au, start),
        None => start,
    };
    if !(a_min_nm > 0.0) {
        return Err(CliError::Config(format!(
            "the roughness profiles touch at separation.start_nm = {start} nm"
        )));
    }
    let grid = matsubara_xi_grid(cfg.stack.temperature_k, 0.95 * a_min_nm)?;
    let core = ItoCore::compute(film, &table, &grid)?;
    Ok(Theory {
        film,
        prescription: cfg.permittivity.prescription.into(),
        grid,
        core,
        roughness,
        a_min_nm,
    })
}

impl Theory {
    fn stack(&self, cfg: &RunConfig, upper_band: bool, carriers: bool) -> Result<LayerStack> {
        Ok(LayerStack::new(
            vec![Layer::half_space(gold(self.prescription))],
            cfg.separation.start_nm,
            vec![
                Layer::film(
                    self.core
                        .permittivity(upper_band, carriers, self.prescription),
                    cfg.stack.ito_thickness_nm,
                ),
                Layer::half_space(DielectricFunction::NinhamParsegian(quartz())),
            ],
        )?)
    }

    fn forces(&self, cfg: &RunConfig, upper_band: bool, carriers: bool) -> Result<Vec<f64>> {
        let stack = self.stack(cfg, upper_band, carriers)?;
        let (spec, quad, r) = (cfg.matsubara(), cfg.quadrature(), cfg.stack.radius_um);
        let smooth = |a: f64| pfa_sphere_plate_force(&stack.with_gap(a), r, &spec, &quad);
        let a = cfg.separation.points();
        Ok(match &self.roughness {
            None => a
                .par_iter()
                .map(|&a| smooth(a))
                .collect::<casimir_core::Result<_>>()?,
            Some((ito, au)) => {
                let reach = a[a.len() - 1] + zero_roughness_level(ito) + zero_roughness_level(au);
                let table =
                    SmoothForceTable::tabulate(0.99 * self.a_min_nm, 1.01 * reach, 1.03, smooth)?;
                a.iter()
                    .map(|&a| rough_force(|x| table.eval(x), ito, au, a))
                    .collect::<casimir_core::Result<_>>()?
            }
        })
    }

    fn table(&self, cfg: &RunConfig, carriers: bool) -> Result<TheoryTable> {
        let band = cfg.permittivity.band;
        let lower = band
            .lower()
            .then(|| self.forces(cfg, false, carriers))
            .transpose()?;
        let upper = band
            .upper()
            .then(|| self.forces(cfg, true, carriers))
            .transpose()?;
        TheoryTable::new(cfg.separation.points(), lower, upper)
    }

    /// Curves for every requested carrier setting and band, and the
    /// carriers-on/off ratio at the first Matsubara frequency (lower band).
    fn permittivity(&self, cfg: &RunConfig) -> Result<(Vec<PermittivityCurve>, f64)> {
        let curve = |upper: bool, carriers: bool| -> Result<PermittivityCurve> {
            let f = self.core.permittivity(upper, carriers, self.prescription);
            let eps = self
                .grid
                .iter()
                .map(|&xi| f.eps_imag_axis(xi))
                .collect::<casimir_core::Result<Vec<_>>>()?;
            let band = if upper { "upper" } else { "lower" };
            Ok(PermittivityCurve::new(
                format!("{}_{}_{band}", self.film.label(), carriers_label(carriers)),
                self.grid.clone(),
                eps,
            )?)
        };
        let mut curves = Vec::new();
        for carriers in cfg.permittivity.carriers.settings() {
            for upper in [false, true] {
                let wanted = if upper {
                    cfg.permittivity.band.upper()
                } else {
                    cfg.permittivity.band.lower()
                };
                if wanted {
                    curves.push(curve(upper, carriers)?);
                }
            }
        }
        let ratio = first_matsubara_ratio(
            &curve(false, true)?,
            &curve(false, false)?,
            cfg.stack.temperature_k,
        )?;
        Ok((curves, ratio))
    }
}

fn permittivity_artifact(curves: &[PermittivityCurve]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_curves_csv(&mut buf, &curves.iter().collect::<Vec<_>>())?;
    Ok(buf)
}

/// Force tables for the requested carrier settings plus the permittivities.
pub fn run_theory(cfg: &RunConfig) -> Result<Artifacts> {
    let theory = prepare_theory(cfg)?;
    let mut out = Artifacts::default();
    let s = &mut out.summary;
    writeln!(
        s,
        "film: {}, prescription: {:?}",
        theory.film.label(),
        theory.prescription
    )
    .unwrap();
    let a = cfg.separation.points();
    writeln!(
        s,
        "separations: {} points on [{}, {}] nm",
        a.len(),
        a[0],
        a[a.len() - 1]
    )
    .unwrap();
    if let Some((ito, au)) = &theory.roughness {
        writeln!(
            s,
            "roughness: on (H0 = {:.2} / {:.2} nm)",
            zero_roughness_level(ito),
            zero_roughness_level(au)
        )
        .unwrap();
    }
    let mut tables = Vec::new();
    for carriers in cfg.permittivity.carriers.settings() {
        let table = theory.table(cfg, carriers)?;
        let (lo, hi) = table.band(0);
        writeln!(
            out.summary,
            "{}: F({} nm) in [{lo:.4}, {hi:.4}] pN",
            carriers_label(carriers),
            a[0]
        )
        .unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        out.add(format!("forces_{}.csv", carriers_label(carriers)), buf);
        tables.push(table);
    }
    if let [on, off] = tables.as_slice() {
        let r: Vec<f64> = (0..a.len())
            .map(|i| {
                let (on_mid, off_mid) = (mid(on.band(i)), mid(off.band(i)));
                (on_mid - off_mid) / on_mid
            })
            .collect();
        writeln!(
            out.summary,
            "carrier reduction: {:.1}% to {:.1}%",
            100.0 * r.iter().cloned().fold(f64::INFINITY, f64::min),
            100.0 * r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        )
        .unwrap();
    }
    let (curves, ratio) = theory.permittivity(cfg)?;
    writeln!(
        out.summary,
        "first Matsubara permittivity ratio (on/off): {ratio:.3}"
    )
    .unwrap();
    out.add("permittivity.csv", permittivity_artifact(&curves)?);
    Ok(out)
}

fn mid(band: (f64, f64)) -> f64 {
    0.5 * (band.0 + band.1)
}

/// Imaginary-axis permittivities only.
pub fn run_permittivity(cfg: &RunConfig) -> Result<Artifacts> {
    let theory = prepare_theory(cfg)?;
    let (curves, ratio) = theory.permittivity(cfg)?;
    let mut out = Artifacts::default();
    writeln!(
        out.summary,
        "film: {}, {} curves on {} frequencies\nfirst Matsubara permittivity ratio (on/off): {ratio:.3}",
        theory.film.label(),
        curves.len(),
        theory.grid.len()
    )
    .unwrap();
    out.add("permittivity.csv", permittivity_artifact(&curves)?);
    Ok(out)
}

fn electrostatics(cfg: &RunConfig) -> Result<PolynomialX> {
    let c = &cfg.calibration;
    Ok(fit_polynomial_x(
        cfg.stack.radius_um,
        (c.electrostatic_lo_nm, c.electrostatic_hi_nm),
    )?)
}

fn force_law(cfg: &RunConfig) -> Result<ForceLaw> {
    let y = &cfg.synthesis;
    match &y.law_theory_csv {
        Some(p) => ForceLaw::from_table(&TheoryTable::from_csv_path(p)?),
        None => Ok(ForceLaw::Power {
            f80_pn: y.law_force_at_80nm_pn,
            exponent: y.law_exponent,
        }),
    }
}

/// Synthetic force-distance curves, one file per curve under `curves/`.
pub fn run_synth(cfg: &RunConfig) -> Result<Artifacts> {
    cfg.validate()?;
    let y = &cfg.synthesis;
    let x = electrostatics(cfg)?;
    let law = force_law(cfg)?;
    let mut truth = CalibrationParams::exact(y.v0_mv, y.m_nm_per_v, y.z0_nm, y.k_tilde_nn_per_v);
    truth.drift_nm_per_curve = y.drift_nm_per_curve;
    let mut spec = SynthesisSpec::new(truth, symmetric_voltages(y.v0_mv, &y.offsets_mv));
    spec.repetitions = y.repetitions;
    spec.noise_pn = y.noise_pn;
    spec.seed = y.seed;
    spec.z_step_nm = y.z_step_nm;
    spec.a_min_nm = y.a_min_nm;
    spec.a_max_nm = y.a_max_nm;
    spec.v0_trend_mv_per_nm = y.v0_trend_mv_per_nm;
    spec.v0_trend_reference_nm = y.a_min_nm;
    let curves = synthesize_curves(&spec, |a| law.eval(a), &x)?;
    let mut out = Artifacts::default();
    for (i, c) in curves.iter().enumerate() {
        let mut buf = Vec::new();
        c.write_csv(&mut buf)?;
        out.add(format!("curves/curve_{i:04}.csv"), buf);
    }
    writeln!(
        out.summary,
        "{} curves at {} voltages, noise {} pN, seed {}",
        curves.len(),
        spec.voltages_mv.len(),
        y.noise_pn,
        y.seed
    )
    .unwrap();
    Ok(out)
}

fn calibrate(
    cfg: &RunConfig,
    data_dir: &Path,
) -> Result<(
    CalibrationFit,
    PolynomialX,
    Vec<casimir_core::calibration::ForceDistanceCurve>,
)> {
    cfg.validate()?;
    let c = &cfg.calibration;
    if c.window_lo_nm < c.electrostatic_lo_nm || c.window_hi_nm > c.electrostatic_hi_nm {
        return Err(CliError::Config(
            "the calibration window must lie inside the electrostatic fit range".into(),
        ));
    }
    let curves = load_curve_dir(data_dir)?;
    let x = electrostatics(cfg)?;
    let opts = FitOptions {
        initial_m_nm_per_v: c.initial_m_nm_per_v,
        initial_z0_nm: c.initial_z0_nm,
        window_nm: (c.window_lo_nm, c.window_hi_nm),
        bin_step_nm: c.bin_step_nm,
        grid_step_nm: c.grid_step_nm,
        drift_correction: c.drift_correction,
        trend_tolerance_mv: c.trend_tolerance_mv,
        ..FitOptions::default()
    };
    let fit = fit_calibration(&curves, &x, &opts)?;
    Ok((fit, x, curves))
}

fn calibration_artifacts(fit: &CalibrationFit, out: &mut Artifacts) {
    let p = &fit.params;
    let mut csv = String::from("parameter,value,half_width_95\n");
    for (name, v, hw) in [
        ("v0_mv", p.v0_mv, p.v0_hw_mv),
        ("m_nm_per_v", p.m_nm_per_v, p.m_hw_nm_per_v),
        ("z0_nm", p.z0_nm, p.z0_hw_nm),
        (
            "k_tilde_nn_per_v",
            p.k_tilde_nn_per_v,
            p.k_tilde_hw_nn_per_v,
        ),
        (
            "drift_nm_per_curve",
            p.drift_nm_per_curve,
            p.drift_hw_nm_per_curve,
        ),
    ] {
        writeln!(csv, "{name},{v:.9e},{hw:.9e}").unwrap();
    }
    out.add("calibration.csv", csv.into_bytes());
    let mut per = String::from("a_nm,v0_mv,v0_se_mv,k_tilde_nn_per_v,k_tilde_se_nn_per_v,curves\n");
    for f in &fit.per_separation {
        writeln!(
            per,
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{}",
            f.a_nm, f.v0_mv, f.v0_se_mv, f.k_tilde_nn_per_v, f.k_tilde_se_nn_per_v, f.curves
        )
        .unwrap();
    }
    out.add("per_separation.csv", per.into_bytes());
    let t = &fit.trend;
    writeln!(
        out.summary,
        "V0 = {:.3} ± {:.3} mV\nm = {:.4} ± {:.4} nm/V\nz0 = {:.3} ± {:.3} nm\nk~ = {:.5} ± {:.5} nN/V\n\
         V0 trend: {:.2e} mV/nm (t = {:.2}, critical {:.2}), change {:.3} mV",
        p.v0_mv,
        p.v0_hw_mv,
        p.m_nm_per_v,
        p.m_hw_nm_per_v,
        p.z0_nm,
        p.z0_hw_nm,
        p.k_tilde_nn_per_v,
        p.k_tilde_hw_nn_per_v,
        t.slope_mv_per_nm,
        t.t_stat,
        t.t_critical,
        t.change_mv
    )
    .unwrap();
}

/// Calibration constants from a directory of curve files.
pub fn run_calibrate(cfg: &RunConfig, data_dir: &Path) -> Result<Artifacts> {
    let (fit, _, curves) = calibrate(cfg, data_dir)?;
    let mut out = Artifacts::default();
    writeln!(
        out.summary,
        "{} curves from {}",
        curves.len(),
        data_dir.display()
    )
    .unwrap();
    calibration_artifacts(&fit, &mut out);
    Ok(out)
}

/// Calibration followed by the Casimir force and its error budget.
pub fn run_extract(cfg: &RunConfig, data_dir: &Path) -> Result<Artifacts> {
    let (fit, x, curves) = calibrate(cfg, data_dir)?;
    let c = &cfg.calibration;
    let forces = extract_casimir(
        &curves,
        &fit.params,
        &x,
        (c.extract_lo_nm, c.extract_hi_nm),
        c.grid_step_nm,
    )?;
    let budget = error_budget(
        &forces,
        &fit.params,
        &x,
        &SystematicSpec {
            noise_floor_pn: c.noise_floor_pn,
        },
    )?;
    let mut out = Artifacts::default();
    writeln!(
        out.summary,
        "{} curves from {}",
        curves.len(),
        data_dir.display()
    )
    .unwrap();
    calibration_artifacts(&fit, &mut out);
    let mut buf = Vec::new();
    write_budget_csv(&mut buf, &budget)?;
    out.add("experiment.csv", buf);
    if let Some(row) = budget
        .iter()
        .min_by(|a, b| (a.a_nm - 80.0).abs().total_cmp(&(b.a_nm - 80.0).abs()))
    {
        writeln!(
            out.summary,
            "F({} nm) = {:.3} ± {:.3} pN (random {:.3}, systematic {:.3})",
            row.a_nm, row.mean_pn, row.total_pn, row.random_pn, row.systematic_pn
        )
        .unwrap();
    }
    Ok(out)
}

/// Theory against experiment, with the carrier reduction profile when a
/// carriers-off table is given.
pub fn run_compare(
    theory: &Path,
    theory_off: Option<&Path>,
    experiment: &Path,
) -> Result<Artifacts> {
    let on = TheoryTable::from_csv_path(theory)?;
    let off = theory_off.map(TheoryTable::from_csv_path).transpose()?;
    let f = std::fs::File::open(experiment).map_err(|e| CliError::io(experiment, e))?;
    let rows = read_budget_csv(f, &experiment.display().to_string())?;
    let report = compare(&on, off.as_ref(), &rows)?;
    let mut out = Artifacts::default();
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    out.add("comparison.csv", buf);
    out.summary = report.summary();
    Ok(out)
}

/// Writes the artifacts and the resolved config into a fresh timestamped
/// directory under `cfg.output.dir`. Files are staged in a hidden directory
/// and renamed into place, so an interrupted run leaves no run directory.
pub fn write_run(cfg: &RunConfig, command: &str, artifacts: &Artifacts) -> Result<PathBuf> {
    let root = &cfg.output.dir;
    std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
    let base = format!("{command}-{stamp}");
    let staging = root.join(format!(".{base}.partial"));
    std::fs::create_dir(&staging).map_err(|e| CliError::io(&staging, e))?;
    let mut all = artifacts.files.clone();
    all.push(("config.resolved.toml".into(), cfg.to_toml()?.into_bytes()));
    all.push(("summary.txt".into(), artifacts.summary.clone().into_bytes()));
    for (name, bytes) in &all {
        let path = staging.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    }
    for n in 0.. {
        let target = if n == 0 {
            root.join(&base)
        } else {
            root.join(format!("{base}-{n}"))
        };
        if target.exists() {
            continue;
        }
        std::fs::rename(&staging, &target).map_err(|e| CliError::io(&target, e))?;
        return Ok(target);
    }
    unreachable!("an unused run directory name always exists")
}
