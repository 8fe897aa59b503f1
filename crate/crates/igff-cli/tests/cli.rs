//! End-to-end checks of the command-line surface: exit codes, artifact
//! determinism, and the shape of the emitted files.

use std::fs;
use std::path::Path;
use std::process::Command;

fn igff() -> Command {
    Command::new(env!("CARGO_BIN_EXE_igff"))
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn analytics_emits_closed_form_tables() {
    let dir = tempdir("analytics");
    let out = igff()
        .args([
            "analytics",
            "--sigma",
            "2,1",
            "--lambda",
            "0.5,1",
            "--beta",
            "1.5",
            "--out",
        ])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let profile = read(&dir, "speed_profile.csv");
    assert!(profile.starts_with("s,speed,hull"));
    // hull dominates the speed on every row
    for line in profile.lines().skip(1) {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cells[2] >= cells[1] - 1e-12, "row {line}");
    }
    let fe = read(&dir, "free_energy.csv");
    let row = fe.lines().nth(1).unwrap();
    let cells: Vec<&str> = row.split(',').collect();
    assert_eq!(cells[1], "2"); // l_beta at beta = 1.5
    let f: f64 = cells[2].parse().unwrap();
    assert!((f - 2.28125).abs() < 1e-12);
    let rpc: serde_json::Value =
        serde_json::from_str(&read(&dir, "rpc_params.json")).unwrap();
    assert_eq!(rpc[0]["levels"], 1);
    let report: serde_json::Value = serde_json::from_str(&read(&dir, "report.json")).unwrap();
    assert_eq!(report["stages"][0]["ok"], true);
}

#[test]
fn critical_beta_is_noted_not_fatal() {
    let dir = tempdir("critical");
    let out = igff()
        .args([
            "analytics",
            "--sigma",
            "2,1",
            "--lambda",
            "0.5,1",
            "--beta",
            "1.0",
            "--out",
        ])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(&read(&dir, "report.json")).unwrap();
    let notes = report["stages"][0]["notes"].as_array().unwrap();
    assert!(notes.iter().any(|n| n.as_str().unwrap().contains("critical")));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempdir("badcfg");
    let cfg = dir.join("bad.toml");
    fs::write(
        &cfg,
        "kind = \"analytics\"\nsigma = [1.0, 1.0, 1.0]\nlambda = [0.5, 0.4, 1.0]\n",
    )
    .unwrap();
    let out = igff().args(["analytics", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lambda"), "stderr: {err}");
    assert!(err.contains("not strictly increasing"), "stderr: {err}");
}

#[test]
fn simulate_then_rpc_then_plotdata_round_trip() {
    let dir = tempdir("pipeline");
    let run = |args: &[&str]| {
        let out = igff().args(args).arg(&dir).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let common = [
        "--sigma", "2,1", "--lambda", "0.5,1", "--beta", "1.5", "--n", "8", "--samples", "6",
        "--seed", "7", "--out",
    ];
    let mut args = vec!["simulate"];
    args.extend_from_slice(&common);
    run(&args);
    let fn_csv = read(&dir, "fn_samples_n8_b1p5.csv");
    assert!(fn_csv.starts_with("seed,n,beta,f_n,f_n_rho,max_psi"));
    assert_eq!(fn_csv.lines().count(), 1 + 6);
    let cdf = read(&dir, "two_overlap_cdf_n8_b1p5.csv");
    let rows: Vec<Vec<f64>> = cdf
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    for w in rows.windows(2) {
        assert!(w[0][1] <= w[1][1] + 1e-12, "cdf not monotone");
    }
    assert!((rows.last().unwrap()[1] - 1.0).abs() < 1e-12);

    let mut args = vec!["rpc"];
    args.extend_from_slice(&common);
    run(&args);
    assert!(dir.join("rpc_atoms_b1p5.csv").exists());
    assert!(dir.join("match_b1p5.json").exists());
    let m: serde_json::Value = serde_json::from_str(&read(&dir, "match_b1p5.json")).unwrap();
    assert_eq!(m["rpc_matches_closed_form"], true);

    let mut args = vec!["plotdata"];
    args.extend_from_slice(&common);
    run(&args);
    assert!(dir.join("fig_speed.csv").exists());
    assert!(dir.join("fig_free_energy_b1p5.csv").exists());
    let fig = read(&dir, "fig_overlap_cdf_b1p5.csv");
    for line in fig.lines().skip(1) {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        for &c in &cells[1..] {
            assert!((-1e-9..=1.0 + 1e-9).contains(&c), "column outside [0,1]: {line}");
        }
    }
}

#[test]
fn identical_configs_produce_identical_artifacts() {
    let a = tempdir("det-a");
    let b = tempdir("det-b");
    for dir in [&a, &b] {
        let out = igff()
            .args([
                "simulate", "--sigma", "2,1", "--lambda", "0.5,1", "--beta", "1.5", "--n", "8",
                "--samples", "4", "--seed", "11", "--out",
            ])
            .arg(dir)
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    for name in ["fn_samples_n8_b1p5.csv", "two_overlap_cdf_n8_b1p5.csv", "summary.json"] {
        assert_eq!(read(&a, name), read(&b, name), "mismatch in {name}");
    }
    // reports differ only in the configured out_dir; normalize and compare
    let ra = read(&a, "report.json").replace(a.to_str().unwrap(), "OUT");
    let rb = read(&b, "report.json").replace(b.to_str().unwrap(), "OUT");
    assert_eq!(ra, rb);
}

#[test]
fn plotdata_without_betas_notes_missing_cdf() {
    let dir = tempdir("nobeta");
    let cfg = dir.join("cfg.toml");
    fs::write(
        &cfg,
        format!(
            "kind = \"analytics\"\nsigma = [1.0]\nlambda = [1.0]\nbetas = []\nns = [8]\nout_dir = {:?}\n",
            dir.to_str().unwrap()
        ),
    )
    .unwrap();
    let out = igff().args(["plotdata", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&read(&dir, "plotdata_report.json")).unwrap();
    let notes = report["notes"].as_array().unwrap();
    assert!(notes.iter().any(|n| n.as_str().unwrap().contains("empty beta list")));
    assert!(!dir.join("fig_overlap_cdf_b1p5.csv").exists());
}

fn tempdir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("igff-cli-test-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}
