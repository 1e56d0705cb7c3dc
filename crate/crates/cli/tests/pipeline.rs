use std::path::Path;

use casimir_cli::commands::{
    run_compare, run_extract, run_permittivity, run_synth, run_theory, write_run, Artifacts,
};
use casimir_cli::config::{BandChoice, CarriersChoice, RunConfig};
use casimir_cli::table::TheoryTable;
use casimir_core::calibration::read_budget_csv;
use casimir_core::kramers_kronig::read_curves_csv;

fn defaults(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse("schema_version = 1\n", Path::new(".")).unwrap();
    cfg.output.dir = out.to_path_buf();
    cfg
}

fn table(a: &Artifacts, name: &str) -> TheoryTable {
    TheoryTable::from_reader(a.get(name).unwrap(), name).unwrap()
}

/// Writes the artifacts and returns the run directory.
fn persist(cfg: &RunConfig, cmd: &str, a: &Artifacts) -> std::path::PathBuf {
    write_run(cfg, cmd, a).unwrap()
}

#[test]
fn config_serialisation_is_idempotent() {
    let text = r#"
schema_version = 1
[stack]
film = "uv_treated"
ito_thickness_nm = 80.0
[permittivity]
prescription = "plasma"
carriers = "off"
band = "upper"
[separation]
start_nm = 70.0
stop_nm = 120.0
step_nm = 2.5
[synthesis]
offsets_mv = [10.0, 20.0, 30.0]
seed = 7
"#;
    let cfg = RunConfig::parse(text, Path::new(".")).unwrap();
    let once = cfg.to_toml().unwrap();
    let back = RunConfig::parse(&once, Path::new(".")).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_toml().unwrap(), once);
}

#[test]
fn theory_brackets_the_measured_anchors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = defaults(dir.path());
    cfg.permittivity.carriers = CarriersChoice::Both;
    let out = run_theory(&cfg).unwrap();
    let slack = |(lo, hi): (f64, f64), f: f64| lo * 1.05 <= f && f <= hi * 0.95;
    let on = table(&out, "forces_carriers_on.csv");
    let off = table(&out, "forces_carriers_off.csv");
    assert!(
        slack(on.band_at(80.0).unwrap(), -143.7),
        "{:?}",
        on.band_at(80.0)
    );
    assert!(
        slack(off.band_at(80.0).unwrap(), -105.5),
        "{:?}",
        off.band_at(80.0)
    );
}

#[test]
fn carrier_reduction_profile_is_in_band() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = defaults(dir.path());
    cfg.permittivity.carriers = CarriersChoice::Both;
    let out = run_theory(&cfg).unwrap();
    let on = table(&out, "forces_carriers_on.csv");
    let off = table(&out, "forces_carriers_off.csv");
    for i in 0..on.a_nm.len() {
        let mid = |t: &TheoryTable| {
            let (lo, hi) = t.band(i);
            0.5 * (lo + hi)
        };
        let r = (mid(&on) - mid(&off)) / mid(&on);
        assert!((0.10..=0.45).contains(&r), "a = {}: {r}", on.a_nm[i]);
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = defaults(dir.path());
    cfg.separation.stop_nm = 80.0;
    cfg.permittivity.carriers = CarriersChoice::Both;
    assert_eq!(run_theory(&cfg).unwrap(), run_theory(&cfg).unwrap());
    cfg.synthesis.repetitions = 2;
    assert_eq!(run_synth(&cfg).unwrap(), run_synth(&cfg).unwrap());
    cfg.roughness.enabled = true;
    cfg.separation.stop_nm = 65.0;
    assert_eq!(run_theory(&cfg).unwrap(), run_theory(&cfg).unwrap());
}

#[test]
fn run_directory_holds_resolved_config_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = defaults(dir.path());
    cfg.permittivity.band = BandChoice::Lower;
    cfg.permittivity.carriers = CarriersChoice::On;
    let out = run_permittivity(&cfg).unwrap();
    let first = persist(&cfg, "permittivity", &out);
    let second = persist(&cfg, "permittivity", &out);
    assert_ne!(first, second);
    let resolved = std::fs::read_to_string(first.join("config.resolved.toml")).unwrap();
    assert_eq!(RunConfig::parse(&resolved, Path::new(".")).unwrap(), cfg);
    let curves = read_curves_csv(
        std::fs::File::open(first.join("permittivity.csv")).unwrap(),
        "p",
    )
    .unwrap();
    assert_eq!(curves.len(), 1);
    assert!(std::fs::read_to_string(first.join("summary.txt"))
        .unwrap()
        .contains("ratio"));
    let names: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert!(names
        .iter()
        .all(|n| !n.to_string_lossy().ends_with(".partial")));
}

#[test]
fn synthetic_extraction_recovers_the_law() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = defaults(dir.path());
    let synth = persist(&cfg, "synth", &run_synth(&cfg).unwrap());
    let out = run_extract(&cfg, &synth.join("curves")).unwrap();
    let rows = read_budget_csv(out.get("experiment.csv").unwrap(), "experiment").unwrap();
    assert!(!rows.is_empty());
    let y = &cfg.synthesis;
    for r in &rows {
        let law = y.law_force_at_80nm_pn * (80.0 / r.a_nm).powf(y.law_exponent);
        assert!(
            (r.mean_pn - law).abs() <= r.total_pn,
            "a = {}: {} vs {law}",
            r.a_nm,
            r.mean_pn
        );
    }
    let cal = String::from_utf8(out.get("calibration.csv").unwrap().to_vec()).unwrap();
    assert!(cal.starts_with("parameter,value,half_width_95\nv0_mv,"));
}

#[test]
fn comparison_flags_the_wrong_carrier_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = defaults(dir.path());
    cfg.permittivity.carriers = CarriersChoice::Both;
    let theory = persist(&cfg, "theory", &run_theory(&cfg).unwrap());
    let on = theory.join("forces_carriers_on.csv");
    let off = theory.join("forces_carriers_off.csv");

    cfg.synthesis.law_theory_csv = Some(off.clone());
    cfg.synthesis.seed = 5;
    let synth = persist(&cfg, "synth", &run_synth(&cfg).unwrap());
    let extract = persist(
        &cfg,
        "extract",
        &run_extract(&cfg, &synth.join("curves")).unwrap(),
    );
    let experiment = extract.join("experiment.csv");

    let against_on = run_compare(&on, Some(&off), &experiment).unwrap();
    let against_off = run_compare(&off, None, &experiment).unwrap();
    let agreeing = |a: &Artifacts| {
        let text = String::from_utf8(a.get("comparison.csv").unwrap().to_vec()).unwrap();
        let flags: Vec<bool> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(5) == Some("1"))
            .collect();
        flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
    };
    assert!(agreeing(&against_on) < 0.1, "{}", against_on.summary);
    assert!(agreeing(&against_off) > 0.9, "{}", against_off.summary);
    assert!(against_on.summary.contains("carrier reduction"));
}

#[test]
fn compare_rejects_disjoint_grids() {
    let dir = tempfile::tempdir().unwrap();
    let theory = dir.path().join("t.csv");
    let exp = dir.path().join("e.csv");
    std::fs::write(&theory, "a_nm,f_lower_pn\n60,-300\n70,-200\n").unwrap();
    std::fs::write(
        &exp,
        "a_nm,f_mean_pn,random_pn,systematic_pn,total_pn,separation_error_nm,samples\n200,-10,1,1,1.4,0.5,10\n",
    )
    .unwrap();
    assert!(run_compare(&theory, None, &exp).is_err());
}
