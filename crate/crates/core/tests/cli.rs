use std::fs;
use std::path::Path;
use std::process::Command;

use clfdr_core::data::write_counts;
use clfdr_core::mixture::MixtureParams;
use clfdr_core::sim::{sample_dataset, Procedure, SimConfig};
use clfdr_core::threshold::SizePmf;
use serde_json::Value;

const HEADER: &str = "0.86,1.34,1.81,2.37,3.00\n";

fn clfdr(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_clfdr"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn bh_with_unit_p_values_rejects_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("counts.csv");
    // Equal counts put T at its null mean, so Z = 0 and p = 1.
    fs::write(&input, format!("{HEADER}1,1,1,1,1\n2,2,2,2,2\n3,3,3,3,3\n")).unwrap();
    let out = dir.path().join("out");
    let (code, err) = clfdr(&[
        "analyze",
        input.to_str().unwrap(),
        "--method",
        "bh",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let rows = csv_rows(&out.join("tests.csv"));
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!((r[4].parse::<f64>().unwrap() - 1.0).abs() < 1e-12, "{r:?}");
        assert_eq!(r[6], "retain");
    }
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["k"], 0);
    assert_eq!(summary["alpha"], 0.05);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "analyze");
}

#[test]
fn clfdr_recovers_mixture() {
    let truth = MixtureParams::new(vec![0.0, -1.13, 0.78], vec![0.69, 0.16, 0.15]).unwrap();
    let mut cfg = SimConfig::new(2000, truth.clone(), 0.05, 1, 2024, vec![Procedure::Bh]);
    cfg.size_pmf = Some(SizePmf::new((5..=100).map(|n| (n, 1.0 / 96.0)).collect()).unwrap());
    let (ds, _) = sample_dataset(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("counts.csv");
    write_counts(&ds, fs::File::create(&input).unwrap()).unwrap();
    let out = dir.path().join("out");
    let args = [
        "clfdr",
        "analyze",
        input.to_str().unwrap(),
        "--components",
        "3",
        "--out-dir",
        out.to_str().unwrap(),
    ];
    assert_eq!(clfdr_core::cli::run(args), 0);

    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["method"], "clfdr");
    let fit = &summary["fit"];
    assert_eq!(fit["converged"], true);
    let got = |key: &str| -> Vec<f64> {
        fit[key]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect()
    };
    for (g, t) in got("gammas").iter().zip(truth.gammas()) {
        assert!((g - t).abs() <= 0.15, "gamma {g} vs {t}");
    }
    for (p, t) in got("pis").iter().zip(truth.pis()) {
        assert!((p - t).abs() <= 0.05, "pi {p} vs {t}");
    }
    let rows = csv_rows(&out.join("tests.csv"));
    assert_eq!(rows.len(), 2000);
    let rejected = rows.iter().filter(|r| r[6] == "reject").count();
    assert_eq!(rejected as u64, summary["k"].as_u64().unwrap());
}

#[test]
fn analyze_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    fs::write(&input, format!("{HEADER}1,2,x,4,5\n")).unwrap();
    let out = dir.path().join("out");
    let (code, err) = clfdr(&[
        "analyze",
        input.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(!err.is_empty());

    let missing = dir.path().join("nope.csv");
    assert_eq!(clfdr(&["analyze", missing.to_str().unwrap()]).0, 2);
    fs::write(&input, format!("{HEADER}1,2,3,4,5\n")).unwrap();
    assert_eq!(
        clfdr(&[
            "analyze",
            input.to_str().unwrap(),
            "--alpha",
            "0",
            "--out-dir",
            out.to_str().unwrap()
        ])
        .0,
        2
    );
}

#[test]
fn thresholds_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, err) = clfdr(&[
        "thresholds",
        "--pi0",
        "0.5",
        "--gamma1",
        "1",
        "--lambda",
        "0.2",
        "--out-dir",
        out,
    ]);
    assert_eq!(code, 0, "{err}");

    let bounds = csv_rows(&dir.path().join("boundaries.csv"));
    assert_eq!(bounds.len(), 1000);
    let a = |n: usize| bounds[n - 1][2].parse::<f64>().unwrap();
    assert_eq!(bounds[4][0], "5");
    assert!((a(5) - 1.59).abs() < 0.01, "{}", a(5));
    assert!((a(25) - 2.20).abs() < 0.01, "{}", a(25));

    let frontier = csv_rows(&dir.path().join("frontier.csv"));
    let row = frontier
        .iter()
        .find(|r| {
            r[..3]
                .iter()
                .map(|v| v.parse::<f64>().unwrap())
                .eq([0.2, 0.5, 1.0])
        })
        .expect("frontier row for the requested model");
    assert!(row[3].parse::<u64>().unwrap() <= 10);
    assert!(dir.path().join("power.csv").exists());
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn thresholds_rejects_null_effect() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = clfdr(&[
        "thresholds",
        "--gamma1",
        "0",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("gamma1 > 0"), "{err}");
}

const SMOKE: &str = r#"{
  "m": 150,
  "params": {"gammas": [0.0, 1.0], "pis": [0.7, 0.3]},
  "covariate": [0.86, 1.34, 1.81, 2.37, 3.0],
  "alpha": 0.1,
  "reps": 1,
  "seed": 3,
  "procedures": ["bh", "clfdr-oracle"]
}"#;

#[test]
fn simulate_smoke_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sim.json");
    fs::write(&config, SMOKE).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let (code, err) = clfdr(&[
            "simulate",
            config.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
        out
    };
    let a = run("a");
    let b = run("b");
    let report = read_json(&a.join("report.json"));
    assert_eq!(report["reps"], 1);
    assert_eq!(report["procedures"].as_array().unwrap().len(), 2);
    for f in ["report.json", "histograms.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn simulate_rejects_malformed_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sim.json");
    let out = dir.path().join("out");
    for body in [
        "{ not json",
        r#"{"m": 10, "params": {"gammas": [0.0, 1.0], "pis": [0.5, 0.5]}, "covariate": [1, 2], "alpha": 2.0, "reps": 1, "seed": 0, "procedures": ["bh"]}"#,
        r#"{"m": 10, "params": {"gammas": [0.0, 1.0], "pis": [0.5, 0.6]}, "covariate": [1, 2], "alpha": 0.1, "reps": 1, "seed": 0, "procedures": ["bh"]}"#,
        r#"{"m": 10, "params": {"gammas": [0.0, 1.0], "pis": [0.5, 0.5]}, "covariate": [1, 2], "alpha": 0.1, "reps": 1, "seed": 0, "procedures": ["magic"]}"#,
    ] {
        fs::write(&config, body).unwrap();
        let (code, err) = clfdr(&[
            "simulate",
            config.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2, "{body}: {err}");
    }
}
