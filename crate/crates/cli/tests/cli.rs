//! End-to-end tests of the binary: spawn it, check output bytes, exit codes,
//! and the stdout/stderr split.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_memcal"));
    c.env_remove("MEMCAL_SEED");
    c
}

fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, content).unwrap();
    p
}

fn tiny_sample(dir: &Path) -> PathBuf {
    write(dir, "sample.csv", "id,x1,y\n1,1,1\n2,2,3\n")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr_str(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

#[test]
fn calibrate_tiny_instance_gaussian() {
    let dir = tempfile::tempdir().unwrap();
    let sample = tiny_sample(dir.path());
    let out = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target", "1.25", "--prior", "gaussian"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    let text = stdout_str(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,d,w,pi_w"));
    let row1: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row2: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row1[0], "1");
    assert_eq!(row2[0], "2");
    let w1: f64 = row1[2].parse().unwrap();
    let w2: f64 = row2[2].parse().unwrap();
    assert!((w1 - 1.8).abs() < 1e-9);
    assert!((w2 - 1.6).abs() < 1e-9);
    let pi_w1: f64 = row1[3].parse().unwrap();
    assert!((pi_w1 - 0.9).abs() < 1e-9);
}

#[test]
fn calibrate_tiny_instance_poisson() {
    let dir = tempfile::tempdir().unwrap();
    let sample = tiny_sample(dir.path());
    let out = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target", "1.25", "--prior", "poisson"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    let text = stdout_str(&out);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let w1: f64 = rows[0][2].parse().unwrap();
    let w2: f64 = rows[1][2].parse().unwrap();
    assert!((w1 - 1.7913).abs() < 1e-4, "w1 = {}", w1);
    assert!((w2 - 1.6044).abs() < 1e-4, "w2 = {}", w2);
}

#[test]
fn estimate_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let sample = tiny_sample(dir.path());
    let out = bin()
        .args(["estimate", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target", "1.25"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout_str(&out)).unwrap();
    assert!((v["estimate"].as_f64().unwrap() - 1.65).abs() < 1e-9);
    assert!((v["ht_estimate"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(v["negative_weights"].as_u64().unwrap(), 0);
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sample = tiny_sample(dir.path());
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");
    for out in [&out_a, &out_b] {
        let st = bin()
            .args(["calibrate", "--sample"])
            .arg(&sample)
            .args(["--design", "uniform:4,2", "--target", "1.25", "--prior", "exponential"])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    }
    assert_eq!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap());

    let sim_a = dir.path().join("sim_a.json");
    let sim_b = dir.path().join("sim_b.json");
    for out in [&sim_a, &sim_b] {
        let st = bin()
            .args([
                "simulate",
                "--n-pop",
                "500",
                "--sample-size",
                "20",
                "--reps",
                "3",
                "--seed",
                "11",
            ])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    }
    assert_eq!(fs::read(&sim_a).unwrap(), fs::read(&sim_b).unwrap());
}

#[test]
fn malformed_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();

    let bad_number = write(dir.path(), "bad.csv", "id,x1,y\n1,abc,1\n2,2,3\n");
    let out = bin()
        .args(["calibrate", "--sample"])
        .arg(&bad_number)
        .args(["--design", "uniform:4,2", "--target", "1.25"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_str(&out);
    assert!(err.contains("line 2"), "missing line number: {}", err);
    assert!(err.contains("x1"), "missing column name: {}", err);

    let bad_header = write(dir.path(), "head.csv", "unit,x1\n1,1\n");
    let out = bin()
        .args(["calibrate", "--sample"])
        .arg(&bad_header)
        .args(["--design", "uniform:4,2", "--target", "1.25"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_str(&out).contains("id,x1"));

    let out = bin()
        .args([
            "calibrate",
            "--sample",
            "no-such-file.csv",
            "--design",
            "uniform:4,2",
            "--target",
            "1.25",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // pi = 0 is rejected naming the strict positivity requirement.
    let sample = tiny_sample(dir.path());
    let zero_pi = write(dir.path(), "zpi.csv", "id,pi\n1,0\n2,0.5\n");
    let out = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .arg("--design")
        .arg(&zero_pi)
        .args(["--target", "1.25"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_str(&out).contains("strictly positive"));

    // Dimension mismatch between auxiliaries and target.
    let out = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target", "1.25,0.5,3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_str(&out).contains("3 entries"));

    // Giving the target twice is an error, never silent precedence.
    let tfile = write(dir.path(), "t.csv", "x1\n1.25\n");
    let out = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target", "1.25"])
        .arg("--target-csv")
        .arg(&tfile)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_str(&out).contains("not both"));
}

#[test]
fn infeasible_target_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let sample = tiny_sample(dir.path());
    let out = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target=-1.0", "--prior", "poisson"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_str(&out);
    assert!(err.contains("\"feasible\": false"), "no report: {}", err);
    assert!(stdout_str(&out).is_empty());
}

#[test]
fn solver_cap_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let sample = tiny_sample(dir.path());
    let out = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .args([
            "--design",
            "uniform:4,2",
            "--target",
            "1.9",
            "--prior",
            "poisson",
            "--max-iter",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr_str(&out));
    assert!(stderr_str(&out).contains("solver failure"));
}

#[test]
fn output_file_is_written_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let sample = tiny_sample(dir.path());
    let out_path = dir.path().join("weights.csv");
    let st = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target", "1.25"])
        .arg("--out")
        .arg(&out_path)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(out_path.exists());
    for entry in fs::read_dir(dir.path()).unwrap() {
        let name = entry.unwrap().file_name().to_string_lossy().to_string();
        assert!(!name.contains(".tmp"), "temporary file left behind: {}", name);
    }
}

#[test]
fn design_file_reorders_to_unit_order() {
    let dir = tempfile::tempdir().unwrap();
    let sample = write(dir.path(), "s.csv", "id,x1,y\n40,2,3\n10,1,1\n");
    let design = write(
        dir.path(),
        "d.csv",
        "id,pi\n10,0.5\n20,0.5\n30,0.5\n40,0.5\n",
    );
    let out = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .arg("--design")
        .arg(&design)
        .args(["--target", "1.25"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    let text = stdout_str(&out);
    let ids: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(ids, ["10", "40"]);
}

#[test]
fn instruments_x_matches_regression_fit() {
    let dir = tempfile::tempdir().unwrap();
    let sample = tiny_sample(dir.path());
    let out = bin()
        .args(["instruments", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target", "1.25", "--instruments", "x"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout_str(&out)).unwrap();
    assert!((v["estimate"].as_f64().unwrap() - 1.65).abs() < 1e-12);
    assert!((v["b_hat"][0].as_f64().unwrap() - 1.4).abs() < 1e-12);
}

#[test]
fn instruments_from_csv_file() {
    let dir = tempfile::tempdir().unwrap();
    let sample = tiny_sample(dir.path());
    // z = x reproduces the regression estimator exactly.
    let zfile = write(dir.path(), "z.csv", "id,z1\n1,1\n2,2\n");
    let wfile = dir.path().join("w.csv");
    let out = bin()
        .args(["instruments", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target", "1.25"])
        .arg("--instruments")
        .arg(format!("csv:{}", zfile.display()))
        .arg("--weights-out")
        .arg(&wfile)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout_str(&out)).unwrap();
    assert!((v["estimate"].as_f64().unwrap() - 1.65).abs() < 1e-12);
    let weights = fs::read_to_string(&wfile).unwrap();
    assert!(weights.starts_with("id,d,w,pi_w\n"));
    let w1: f64 = weights.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((w1 - 1.8).abs() < 1e-9);
}

#[test]
fn amem_reports_unit_self_slope() {
    let dir = tempfile::tempdir().unwrap();
    let pop = write(
        dir.path(),
        "pop.csv",
        "id,x1\n1,1.0\n2,1.25\n3,1.5\n4,1.75\n5,2.0\n",
    );
    let sample = write(
        dir.path(),
        "s.csv",
        "id,x1,y\n2,1.25,3.49\n4,1.75,5.75\n5,2.0,7.39\n",
    );
    let out = bin()
        .args(["amem", "--population"])
        .arg(&pop)
        .arg("--sample")
        .arg(&sample)
        .args(["--design", "uniform:5,3", "--basis", "monomial:2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout_str(&out)).unwrap();
    assert!((v["b_phi"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(v["identity_gap"].as_f64().unwrap() < 1e-9);
}

#[test]
fn efficiency_reports_unit_efficiency_for_exact_predictor() {
    let dir = tempfile::tempdir().unwrap();
    let pop = write(
        dir.path(),
        "pop.csv",
        "id,x1,y\n1,1.0,2.7\n2,1.3,3.8\n3,1.5,4.5\n4,1.8,6.0\n5,2.0,7.4\n",
    );
    let out = bin()
        .args(["efficiency", "--population"])
        .arg(&pop)
        .args(["--u", "exp(x1)", "--design", "uniform:5,2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout_str(&out)).unwrap();
    // Least squares residuals attain the bound under uniform sampling.
    assert!((v["efficiency"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert!((v["fpc"].as_f64().unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn simulate_fresh_population_mode() {
    let base = [
        "simulate",
        "--n-pop",
        "300",
        "--sample-size",
        "15",
        "--reps",
        "4",
        "--seed",
        "21",
    ];
    let fixed = bin().args(base).output().unwrap();
    assert!(fixed.status.success(), "stderr: {}", stderr_str(&fixed));
    let fresh = bin().args(base).arg("--fresh-population").output().unwrap();
    assert!(fresh.status.success(), "stderr: {}", stderr_str(&fresh));
    let again = bin().args(base).arg("--fresh-population").output().unwrap();
    assert_eq!(fresh.stdout, again.stdout, "fresh mode must be reproducible");

    let v: serde_json::Value = serde_json::from_str(&stdout_str(&fresh)).unwrap();
    assert_eq!(v["config"]["fresh_population"], serde_json::json!(true));
    let w: serde_json::Value = serde_json::from_str(&stdout_str(&fixed)).unwrap();
    assert_eq!(w["config"]["fresh_population"], serde_json::json!(false));
    // Different random streams, so the two studies report different means.
    assert_ne!(v["t_y"], w["t_y"]);
}

#[test]
fn simulate_seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let seed_of = |out: &Output| -> u64 {
        let v: serde_json::Value = serde_json::from_str(&stdout_str(out)).unwrap();
        v["config"]["seed"].as_u64().unwrap()
    };
    let base = [
        "simulate",
        "--n-pop",
        "200",
        "--sample-size",
        "10",
        "--reps",
        "2",
    ];

    let out = bin().args(base).env("MEMCAL_SEED", "42").output().unwrap();
    assert_eq!(seed_of(&out), 42);

    let out = bin()
        .args(base)
        .args(["--seed", "9"])
        .env("MEMCAL_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(seed_of(&out), 9);

    let cfg = write(dir.path(), "sim.json", "{\"seed\": 5, \"N\": 200, \"n\": 10, \"reps\": 2}");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .env("MEMCAL_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(seed_of(&out), 5);
}

#[test]
fn simulate_rejects_unknown_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\"repz\": 5}");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_str(&out).contains("repz"));
}

#[test]
fn oracle_design_probabilities_sum_to_one() {
    let out = bin()
        .args(["oracle-design", "--design", "uniform:5,2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout_str(&out);
    let mut total = 0.0;
    let mut count = 0;
    for line in text.lines().skip(1) {
        let prob: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        total += prob;
        count += 1;
    }
    assert_eq!(count, 10);
    assert!((total - 1.0).abs() < 1e-12);

    let out = bin()
        .args(["oracle-design", "--design", "uniform:4,2", "--format", "json"])
        .output()
        .unwrap();
    let v: serde_json::Value = serde_json::from_str(&stdout_str(&out)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 6);
}

#[test]
fn help_covers_documented_flags() {
    let top = bin().arg("--help").output().unwrap();
    assert_eq!(top.status.code(), Some(0));
    let text = stdout_str(&top);
    for sub in [
        "calibrate",
        "estimate",
        "instruments",
        "efficiency",
        "amem",
        "simulate",
        "oracle-design",
    ] {
        assert!(text.contains(sub), "top help misses {}", sub);
    }

    let expectations: [(&str, &[&str]); 6] = [
        (
            "calibrate",
            &["--sample", "--design", "--target", "--target-csv", "--prior", "--tol", "--max-iter", "--ridge", "--out", "--diag"],
        ),
        ("estimate", &["--prior", "--target", "--diag"]),
        (
            "instruments",
            &["--instruments", "--family", "--population", "--weights-out"],
        ),
        ("efficiency", &["--u", "--design", "--population"]),
        ("amem", &["--basis", "--population", "--sample", "--design"]),
        (
            "simulate",
            &["--config", "--seed", "--reps", "--sigma2", "--fresh-population", "--format", "--out"],
        ),
    ];
    for (sub, flags) in expectations {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        let text = stdout_str(&out);
        for flag in flags {
            assert!(text.contains(flag), "{} --help misses {}", sub, flag);
        }
    }
}

#[test]
fn gaussian_q_column_changes_weights() {
    let dir = tempfile::tempdir().unwrap();
    let sample = write(dir.path(), "s.csv", "id,x1,y,q\n1,1,1,1\n2,2,3,0.5\n");
    let plain = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target", "1.25", "--prior", "gaussian"])
        .output()
        .unwrap();
    let weighted = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target", "1.25", "--prior", "gaussian:q"])
        .output()
        .unwrap();
    assert!(plain.status.success());
    assert!(weighted.status.success(), "stderr: {}", stderr_str(&weighted));
    assert_ne!(stdout_str(&plain), stdout_str(&weighted));

    let missing = bin()
        .args(["calibrate", "--sample"])
        .arg(&sample)
        .args(["--design", "uniform:4,2", "--target", "1.25", "--prior", "gaussian:w8"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr_str(&missing).contains("w8"));
}
