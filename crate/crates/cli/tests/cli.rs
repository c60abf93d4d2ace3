use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use covolmm::simkit::{ConstantScenario, HestonScenario, Scenario};
use serde_json::Value;

fn covolmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covolmm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_scenario(dir: &Path, name: &str, sc: &Scenario) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string(sc).unwrap()).unwrap();
    path
}

fn scenario_one(rho: f64, n: usize) -> Scenario {
    Scenario::Constant(ConstantScenario::two_asset(rho, n))
}

#[test]
fn simulate_writes_expected_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "s1.json", &scenario_one(0.5, 30_000));
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let o = covolmm(&[
            "simulate",
            "--input",
            p(&sc),
            "--output",
            p(out),
            "--seed",
            "11",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    let rows = text.lines().count() - 1;
    assert_eq!(rows, 2 * 30_001);
    assert_eq!(text.lines().next().unwrap(), "asset,time,price");
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let truth: Value =
        serde_json::from_str(&fs::read_to_string(a.with_extension("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["integrated"].as_array().unwrap().len(), 2);
}

#[test]
fn heston_with_too_few_steps_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut hs = HestonScenario::two_asset(0.5, [100.0, 100.0]);
    hs.heston.steps = 50;
    let sc = write_scenario(dir.path(), "h.json", &Scenario::Heston(hs));
    let o = covolmm(&[
        "simulate",
        "--input",
        p(&sc),
        "--output",
        p(&dir.path().join("x.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("100 steps"));
}

#[test]
fn estimate_reports_shapes_intervals_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "s.json", &scenario_one(0.5, 20_000));
    let ticks = dir.path().join("t.csv");
    assert!(covolmm(&[
        "simulate",
        "--input",
        p(&sc),
        "--output",
        p(&ticks),
        "--seed",
        "3"
    ])
    .status
    .success());
    let out = dir.path().join("est.json");
    let spec_csv = dir.path().join("spec.csv");
    let o = covolmm(&[
        "estimate",
        "--input",
        p(&ticks),
        "--output",
        p(&out),
        "--level",
        "0.95",
        "--spectral-csv",
        p(&spec_csv),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("d = 2"));
    assert!(stderr.contains("truncation residual"));
    assert!(stderr.contains("grid:"));

    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let est = v["estimate"].as_array().unwrap();
    assert_eq!(est.len(), 2);
    assert_eq!(v["vcov"].as_array().unwrap().len(), 4);
    for ci in v["ci"].as_array().unwrap() {
        let (i, j) = (
            ci["entry"][0].as_u64().unwrap() as usize,
            ci["entry"][1].as_u64().unwrap() as usize,
        );
        let e = est[i][j].as_f64().unwrap();
        assert!(ci["lo"].as_f64().unwrap() < e && e < ci["hi"].as_f64().unwrap());
    }
    assert!(v["diagnostics"]["J"].as_u64().unwrap() > 0);
    assert_eq!(
        fs::read_to_string(&spec_csv)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
        "j,k,component,value"
    );
}

#[test]
fn malformed_csv_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "asset,time,price\nA,0.0,1.0\nA,0.5,oops\nA,1.0,1.1\n").unwrap();
    let o = covolmm(&["estimate", "--input", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(covolmm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        covolmm(&["estimate", "--input", "x.csv", "--level", "1.5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(covolmm(&[]).status.code(), Some(2));
}

#[test]
fn avar_table_hits_the_independent_corner() {
    let o = covolmm(&["avar"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "rho,eta2,var_11,var_12,var_22");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 11 * 20);
    let corner = rows
        .iter()
        .find(|r| r[0] == 0.0 && (r[1] - 1.0).abs() < 1e-12)
        .unwrap();
    assert!((corner[2] - 8.0).abs() < 1e-10);
}

#[test]
fn mc_smoke_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "s.json", &scenario_one(0.5, 2_000));
    let (json, csv) = (dir.path().join("mc.json"), dir.path().join("mc.csv"));
    let o = covolmm(&[
        "--threads",
        "2",
        "mc",
        "--input",
        p(&sc),
        "--output",
        p(&json),
        "--csv",
        p(&csv),
        "--reps",
        "100",
        "--seed",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["reps"], 100);
    assert_eq!(v["estimators"].as_array().unwrap().len(), 4);
    assert!(fs::read_to_string(&csv)
        .unwrap()
        .starts_with("estimator,entry,statistic,value"));
}

#[test]
fn time_span_rescales_raw_clock() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "s.json", &scenario_one(0.3, 5_000));
    let ticks = dir.path().join("t.csv");
    assert!(covolmm(&[
        "simulate",
        "--input",
        p(&sc),
        "--output",
        p(&ticks),
        "--seed",
        "9"
    ])
    .status
    .success());
    // shift the clock to [34200, 57600] seconds
    let raw: String = fs::read_to_string(&ticks)
        .unwrap()
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                return format!("{l}\n");
            }
            let f: Vec<&str> = l.split(',').collect();
            let t: f64 = f[1].parse().unwrap();
            format!("{},{},{}\n", f[0], 34_200.0 + 23_400.0 * t, f[2])
        })
        .collect();
    let raw_path = dir.path().join("raw.csv");
    fs::write(&raw_path, raw).unwrap();
    let a = covolmm(&["estimate", "--input", p(&ticks)]);
    let b = covolmm(&[
        "estimate",
        "--input",
        p(&raw_path),
        "--time-span",
        "34200",
        "57600",
    ]);
    assert!(
        a.status.success() && b.status.success(),
        "{}",
        String::from_utf8_lossy(&b.stderr)
    );
    let (va, vb): (Value, Value) = (
        serde_json::from_slice(&a.stdout).unwrap(),
        serde_json::from_slice(&b.stdout).unwrap(),
    );
    let (ea, eb) = (
        va["estimate"][0][1].as_f64().unwrap(),
        vb["estimate"][0][1].as_f64().unwrap(),
    );
    assert!((ea - eb).abs() < 1e-6 * ea.abs().max(1.0));
}

/// Simulate, estimate, and check the truth lies in the 99.9% interval for nearly every seed.
#[test]
fn round_trip_covers_truth() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), "s.json", &scenario_one(0.5, 10_000));
    let (mut inside, mut total) = (0, 0);
    for seed in 0..20 {
        let ticks = dir.path().join(format!("t{seed}.csv"));
        let seed_s = seed.to_string();
        assert!(covolmm(&[
            "simulate",
            "--input",
            p(&sc),
            "--output",
            p(&ticks),
            "--seed",
            &seed_s
        ])
        .status
        .success());
        let truth: Value =
            serde_json::from_str(&fs::read_to_string(ticks.with_extension("truth.json")).unwrap())
                .unwrap();
        let o = covolmm(&["estimate", "--input", p(&ticks), "--level", "0.999"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        for ci in v["ci"].as_array().unwrap() {
            let (i, j) = (
                ci["entry"][0].as_u64().unwrap() as usize,
                ci["entry"][1].as_u64().unwrap() as usize,
            );
            let t = truth["integrated"][i][j].as_f64().unwrap();
            total += 1;
            if ci["lo"].as_f64().unwrap() <= t && t <= ci["hi"].as_f64().unwrap() {
                inside += 1;
            }
        }
    }
    assert!(inside as f64 >= 0.99 * total as f64, "{inside}/{total}");
}
