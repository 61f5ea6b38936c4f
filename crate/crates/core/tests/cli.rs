use std::process::{Command, Output};

use fourdvar::config::preset;

const PI: f64 = std::f64::consts::PI;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fourdvar"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim())
        .unwrap_or_else(|_| panic!("stderr is not one JSON object: {text}"))
}

#[test]
fn gradcheck_prints_table_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gradcheck",
        "--config",
        "small_linear",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 20);
    for row in rows {
        let cols: Vec<f64> = row.split_whitespace().map(|c| c.parse().unwrap()).collect();
        assert!(cols[3] <= 1e-5 && cols[6] <= 1e-4, "{row}");
    }
    assert!(dir.path().join("gradcheck.json").exists());
}

#[test]
fn simulate_matches_analytic_heat_solution() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--config",
        "heat_analytic",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let mut reader = csv::Reader::from_path(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["step", "t", "node", "x", "value"]
    );
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let t: f64 = rec[1].parse().unwrap();
        let x: f64 = rec[3].parse().unwrap();
        let v: f64 = rec[4].parse().unwrap();
        worst = worst.max((v - (-PI * PI * t).exp() * (PI * x).sin()).abs());
        rows += 1;
    }
    assert_eq!(rows, 501 * 64);
    assert!(worst <= 5e-3, "{worst}");
}

#[test]
fn missing_config_is_reported() {
    let out = run(&["simulate", "--config", "does/not/exist.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["kind"], "config_not_found");
}

#[test]
fn usage_errors_are_json() {
    let out = run(&["assimilate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["kind"], "usage");
}

#[test]
fn kkt_of_assimilated_control() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(
        run(&["assimilate", "--config", "small_semilinear", "--out", d])
            .status
            .success()
    );
    let control = dir.path().join("control.csv");
    let kdir = dir.path().join("k");
    let out = run(&[
        "kkt",
        "--config",
        "small_semilinear",
        "--control",
        control.to_str().unwrap(),
        "--out",
        kdir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let fresh: serde_json::Value =
        serde_json::from_slice(&std::fs::read(kdir.join("kkt.json")).unwrap()).unwrap();
    let saved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("kkt.json")).unwrap()).unwrap();
    // the control round-trips through its decimal representation exactly
    assert_eq!(fresh, saved);

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    assert_eq!(report["cost"]["total"], saved["cost"]);
}

#[test]
fn seed_override_changes_noise_only_where_expected() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    for (sub, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let o = run(&[
            "assimilate",
            "--config",
            "small_semilinear",
            "--seed",
            seed,
            "--out",
            &p(sub),
        ]);
        assert!(o.status.success());
    }
    let read = |s: &str| std::fs::read(dir.path().join(s).join("control.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn json_format_and_ssc_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = run(&[
        "assimilate",
        "--config",
        "second_order_2d",
        "--format",
        "json",
        "--out",
        d,
    ]);
    assert!(o.status.success());
    let ctrl: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("control.json")).unwrap()).unwrap();
    assert_eq!(ctrl["values"].as_array().unwrap().len(), 64);
    let traj: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("trajectory.json")).unwrap())
            .unwrap();
    assert_eq!(traj["times"].as_array().unwrap().len(), 21);

    let sdir = dir.path().join("s");
    let o = run(&[
        "ssc",
        "--config",
        "second_order_2d",
        "--out",
        sdir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ssc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(sdir.join("ssc.json")).unwrap()).unwrap();
    assert_eq!(ssc["certified"], true);
    assert_eq!(ssc["cone"], "active_positive_multiplier");
    let growth: serde_json::Value =
        serde_json::from_slice(&std::fs::read(sdir.join("growth.json")).unwrap()).unwrap();
    assert_eq!(growth["passed"], true);
}

#[test]
fn config_files_resolve_relative_truth_paths() {
    let dir = tempfile::tempdir().unwrap();
    let grid_rows: String = (0..16)
        .map(|j| format!("{j},{},{}\n", (j + 1) as f64 / 17.0, (j as f64 * 0.4).sin()))
        .collect();
    std::fs::write(
        dir.path().join("u.csv"),
        format!("node,x,value\n{grid_rows}"),
    )
    .unwrap();
    let text = preset("small_linear")
        .unwrap()
        .replace("kind = \"sine_modes\"", "kind = \"file\"\npath = \"u.csv\"")
        .replace("modes = [\n  { index = [1], amplitude = 1.0 },\n  { index = [3], amplitude = 0.3 },\n]\n", "");
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let truth = std::fs::read_to_string(out.join("truth.csv")).unwrap();
    assert!(truth
        .lines()
        .nth(2)
        .unwrap()
        .ends_with(&format!(",{}", 0.4f64.sin())));
}
