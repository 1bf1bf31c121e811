use std::path::Path;
use std::process::Command;

use mfenkf::models::io::{read_basis, read_snapshots};
use mfenkf_harness::experiment::DIVERGENCE_FACTOR;
use mfenkf_harness::sweep::CSV_HEADER;
use mfenkf_harness::{run_config_to, run_twin_experiment, ExperimentConfig, Setup};

const L96: &str = r#"
name = "l96"
seed = 3
runs = 2
output = "l96.csv"
nature = { kind = "lorenz96" }
[obs]
count = 40
variance = 1.0
window = 0.05
[schedule]
spinup = 20
t0 = 21
tf = 80
nature_spinup = 200
climatology = 100
[sweep]
n = [20]
alpha = [1.05]
[[forest]]
id = "uni"
[[forest.tree]]
model = { kind = "lorenz96" }
"#;

fn l96_with(n: &str, alpha: &str, forests: usize) -> ExperimentConfig {
    let mut text = L96.replace("n = [20]", n).replace("alpha = [1.05]", alpha);
    for k in 1..forests {
        text.push_str(&format!(
            "[[forest]]\nid = \"biased-{k}\"\n[[forest.tree]]\nmodel = {{ kind = \"lorenz96\", forcing = {} }}\n",
            8.0 + 0.1 * k as f64
        ));
    }
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn unifidelity_lorenz96_tracks_below_observation_noise() {
    let cfg = l96_with("n = [40]", "alpha = [1.02]", 1);
    let setup = Setup::build(&cfg).unwrap();
    let r = run_twin_experiment(&setup, 0, 40, 1.02, 0).unwrap();
    assert!(r.diverged.is_none());
    let e = r.rmse.unwrap();
    assert!(e < 0.5, "rmse {e}");
    assert_eq!(r.step_errors.len(), 81);
    assert_eq!(r.hf_runs_per_step, 40.0);
    assert!(e < 0.2 * setup.nature.climatology.spread);
}

#[test]
fn same_seed_same_run_and_runs_differ() {
    let cfg = l96_with("n = [10]", "alpha = [1.02]", 1);
    let setup = Setup::build(&cfg).unwrap();
    let a = run_twin_experiment(&setup, 0, 10, 1.02, 0).unwrap();
    let b = run_twin_experiment(&setup, 0, 10, 1.02, 0).unwrap();
    let c = run_twin_experiment(&setup, 0, 10, 1.02, 1).unwrap();
    assert_eq!(a.step_errors, b.step_errors);
    assert_ne!(a.step_errors, c.step_errors);
}

#[test]
fn sweep_rows_cover_the_grid_in_order() {
    let cfg = l96_with(
        "n = [5, 8]",
        "alpha_range = { start = 1.0, stop = 1.1, count = 3 }",
        2,
    );
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.csv");
    let cells = run_config_to(&cfg, &out).unwrap();
    assert_eq!(cells.len(), 2 * 3 * 2);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        CSV_HEADER
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 12);
    let keys: Vec<(String, String, String)> = rows
        .iter()
        .map(|r| (r[0].to_string(), r[1].to_string(), r[2].to_string()))
        .collect();
    assert_eq!(keys[0], ("uni".into(), "5".into(), "1".into()));
    assert_eq!(keys[1], ("biased-1".into(), "5".into(), "1".into()));
    assert_eq!(keys[2], ("uni".into(), "5".into(), "1.05".into()));
    assert_eq!(keys[11], ("biased-1".into(), "8".into(), "1.1".into()));
    for r in &rows {
        assert_eq!(&r[3], "2");
        assert_eq!(&r[8], "");
    }
}

#[test]
fn single_cell_sweep_has_one_row() {
    let cfg = l96_with("n = [6]", "alpha = [1.0]", 1);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("one.csv");
    run_config_to(&cfg, &out).unwrap();
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
}

#[test]
fn tiny_ensemble_without_inflation_is_reported_not_raised() {
    let cfg = l96_with("n = [2]", "alpha = [1.0]", 1);
    let setup = Setup::build(&cfg).unwrap();
    let r = run_twin_experiment(&setup, 0, 2, 1.0, 0).unwrap();
    match &r.diverged {
        Some(reason) => assert!(r.rmse.is_none() && !reason.is_empty()),
        None => assert!(r.rmse.unwrap() < DIVERGENCE_FACTOR * setup.nature.climatology.spread),
    }
}

#[test]
fn unwritable_output_fails_before_simulating() {
    let mut cfg = l96_with("n = [20]", "alpha = [1.05]", 1);
    cfg.schedule.nature_spinup = 1_000_000_000;
    let err = run_config_to(&cfg, Path::new("/nonexistent-dir/out.csv")).unwrap_err();
    assert!(err.to_string().contains("cannot create"));
}

#[test]
fn forest_root_dimension_must_match_nature() {
    let text = L96.replace(
        "model = { kind = \"lorenz96\" }",
        "model = { kind = \"lorenz96\", dim = 36 }",
    );
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    assert!(Setup::build(&cfg).is_err());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap();
            assert!(cfg.output.is_absolute());
            seen += 1;
        }
    }
    assert!(seen >= 4);
}

fn mfenkf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfenkf"))
}

#[test]
fn cli_snapshot_and_basis_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let snaps = dir.path().join("snaps.bin");
    let basis = dir.path().join("basis.bin");
    let status = mfenkf()
        .args([
            "generate-snapshots",
            "--nx",
            "7",
            "--ny",
            "15",
            "--count",
            "12",
            "--spacing",
            "2",
            "--spinup",
            "20",
        ])
        .arg("--out")
        .arg(&snaps)
        .status()
        .unwrap();
    assert!(status.success());
    let s = read_snapshots(&snaps).unwrap();
    assert_eq!((s.dim(), s.len()), (105, 12));
    let status = mfenkf()
        .args(["build-pod", "--rank", "4", "--center", "--snapshots"])
        .arg(&snaps)
        .arg("--out")
        .arg(&basis)
        .status()
        .unwrap();
    assert!(status.success());
    let b = read_basis(&basis).unwrap();
    assert_eq!(b.phi.shape(), (105, 4));
    assert!(b.shift.is_some());
}

#[test]
fn cli_run_validate_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("l96.toml");
    std::fs::write(&config, L96.replace("tf = 80", "tf = 25")).unwrap();
    let out = mfenkf().arg("validate").arg(&config).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = mfenkf()
        .args(["run", "--threads", "2"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("l96.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, L96.replace("t0 = 21", "t0 = 10")).unwrap();
    assert_eq!(
        mfenkf().arg("run").arg(&bad).status().unwrap().code(),
        Some(2)
    );
    let missing = dir.path().join("missing.toml");
    assert_eq!(
        mfenkf()
            .arg("validate")
            .arg(&missing)
            .status()
            .unwrap()
            .code(),
        Some(2)
    );
}

#[test]
fn cli_reports_when_every_cell_diverges() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("diverge.toml");
    // A surrogate with absurd forcing overflows in every run.
    let text = L96.replace("tf = 80", "tf = 25")
        + "[[forest.tree.surrogate]]\nmodel = { kind = \"same-space\", model = { kind = \"lorenz96\", forcing = 1e200 } }\nensemble = 4\n";
    std::fs::write(&config, text).unwrap();
    let out = mfenkf().arg("run").arg(&config).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
