use std::path::Path;
use std::process::{Command, Output};

fn casimir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casimir"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn run_dirs(dir: &Path) -> usize {
    match std::fs::read_dir(dir.join("runs")) {
        Ok(entries) => entries.count(),
        Err(_) => 0,
    }
}

#[test]
fn invalid_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        (
            "unknown.toml",
            "schema_version = 1\n[stack]\nfilm_thickness = 3.0\n",
        ),
        ("version.toml", "schema_version = 9\n"),
        (
            "range.toml",
            "schema_version = 1\n[separation]\nstart_nm = 150.0\nstop_nm = 60.0\n",
        ),
        (
            "missing.toml",
            "schema_version = 1\n[permittivity]\noptical_table = \"nope.csv\"\n",
        ),
    ] {
        std::fs::write(dir.path().join(name), text).unwrap();
        let out = casimir(dir.path(), &["--config", name, "theory"]);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{name}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = casimir(dir.path(), &["--tolerance", "0.5", "theory"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run_dirs(dir.path()), 0);
}

#[test]
fn unusable_data_exits_3_without_output() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    for data in ["empty", "absent"] {
        let out = casimir(dir.path(), &["extract", "--data", data]);
        assert_eq!(
            out.status.code(),
            Some(3),
            "{data}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    std::fs::write(dir.path().join("bad.csv"), "a_nm,f_lower_pn\n60,oops\n").unwrap();
    let out = casimir(
        dir.path(),
        &["compare", "--theory", "bad.csv", "--experiment", "bad.csv"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(run_dirs(dir.path()), 0);
}

#[test]
fn drifting_contact_potential_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("trend.toml"),
        "schema_version = 1\n[synthesis]\nv0_trend_mv_per_nm = 0.01\nrepetitions = 4\n",
    )
    .unwrap();
    let synth = casimir(dir.path(), &["--config", "trend.toml", "synth"]);
    assert!(
        synth.status.success(),
        "{}",
        String::from_utf8_lossy(&synth.stderr)
    );
    let stdout = String::from_utf8(synth.stdout).unwrap();
    let run = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .unwrap();
    let curves = format!("{run}/curves");
    let out = casimir(
        dir.path(),
        &["--config", "trend.toml", "extract", "--data", &curves],
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(run_dirs(dir.path()), 1);
}

#[test]
fn theory_run_writes_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = casimir(
        dir.path(),
        &[
            "--out",
            "here",
            "--carriers",
            "on",
            "--band",
            "lower",
            "--tolerance",
            "1e-6",
            "theory",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("here"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(runs.len(), 1);
    let mut files: Vec<String> = std::fs::read_dir(&runs[0])
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "config.resolved.toml",
            "forces_carriers_on.csv",
            "permittivity.csv",
            "summary.txt"
        ]
    );
    let resolved = std::fs::read_to_string(runs[0].join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("band = \"lower\"") && resolved.contains("matsubara_rel = 0.000001"));
}
