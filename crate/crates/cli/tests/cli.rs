use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rbsmc"))
}

fn config(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate_to(dir: &Path, n: usize) -> PathBuf {
    let data = dir.join("sim.csv");
    let out = run(&["simulate", "--config", s(&config("model.json")), "-n", &n.to_string(), "--seed", "3", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn error_kind(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate_to(dir.path(), 12);
    let first = std::fs::read(&a).unwrap();
    let b = run(&["simulate", "--config", s(&config("model.json")), "-n", "12", "--seed", "3"]);
    assert!(b.status.success());
    assert_eq!(first, b.stdout);
    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().count(), 13);
}

#[test]
fn filter_and_smooth_write_probabilities() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_to(dir.path(), 15);
    let f = run(&["filter", "--config", s(&config("model.json")), "--data", s(&data), "--particles", "50"]);
    assert!(f.status.success());
    let text = String::from_utf8(f.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "time,p_regime_1,p_regime_2");
    for line in lines {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for method in ["ffbs", "ffbs-rejuv", "two-filter", "two-filter-rejuv", "oracle"] {
        let out = dir.path().join(format!("{method}.csv"));
        let r = run(&["smooth", "--config", s(&config("model.json")), "--data", s(&data), "--method", method, "--particles", "40", "--out", s(&out)]);
        assert!(r.status.success(), "{method}: {}", String::from_utf8_lossy(&r.stderr));
        let mut rdr = csv::Reader::from_path(&out).unwrap();
        let cols: Vec<usize> =
            rdr.headers().unwrap().iter().enumerate().filter(|(_, h)| h.starts_with("p_regime")).map(|(i, _)| i).collect();
        assert_eq!(cols.len(), 2);
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec.unwrap();
            rows += 1;
            for &c in &cols {
                let p: f64 = rec[c].parse().unwrap();
                assert!((0.0..=1.0).contains(&p));
            }
        }
        assert_eq!(rows, 15);
    }
}

#[test]
fn runs_are_byte_identical_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_to(dir.path(), 10);
    let go = |seed: &str| {
        run(&["smooth", "--config", s(&config("model.json")), "--data", s(&data), "--method", "two-filter-rejuv", "--particles", "30", "--seed", seed]).stdout
    };
    assert_eq!(go("5"), go("5"));
    assert_ne!(go("5"), go("6"));
}

#[test]
fn oracle_refuses_long_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_to(dir.path(), 25);
    let r = run(&["smooth", "--config", s(&config("model.json")), "--data", s(&data), "--method", "oracle"]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(error_kind(&r), "instance_too_large");
}

#[test]
fn invalid_input_exits_with_one() {
    let r = run(&["smooth", "--config", s(&config("model.json")), "--data", "missing.csv", "--method", "nope"]);
    assert_eq!(r.status.code(), Some(1));
    let r = run(&["frobnicate"]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(error_kind(&r), "usage");
    let r = run(&["filter", "--config", s(&config("model.json")), "--data", "/nonexistent/y.csv"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn benchmark_tables_have_one_row_per_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(config("benchmark.json")).unwrap()).unwrap();
    cfg["runs"] = 5.into();
    cfg["n"] = 6.into();
    let path = dir.path().join("bench.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let r = run(&["benchmark", "--config", s(&path), "--out", s(dir.path())]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(summary["benchmark_is_exact"], true);
    let methods = summary["methods"].as_array().unwrap().len();
    for table in ["error.csv", "variance.csv"] {
        let mut rdr = csv::Reader::from_path(dir.path().join(table)).unwrap();
        assert_eq!(rdr.headers().unwrap().len(), methods + 1);
        assert_eq!(rdr.records().count(), 6);
    }
}

#[test]
fn calibrate_writes_one_trace_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(config("calibrate.json")).unwrap()).unwrap();
    cfg["optimizer"]["max_generations"] = 5.into();
    cfg["optimizer"]["lambda"] = 10.into();
    cfg["optimizer"]["mu"] = 5.into();
    let path = dir.path().join("cal.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = dir.path().join("out");
    let r = run(&[
        "calibrate", "--config", s(&path), "--data", s(&config("commodity_panel.csv")),
        "--iterations", "2", "--particles", "20", "--out", s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(v["iterations"], 2);
    let mut rdr = csv::Reader::from_path(out.join("trace.csv")).unwrap();
    assert_eq!(rdr.records().count(), 2);
    let params: rbsmc::commodity::TwoFactorParams =
        serde_json::from_str(&std::fs::read_to_string(out.join("params.json")).unwrap()).unwrap();
    assert!(params.alpha[0] >= params.alpha[1]);
    assert!(out.join("posteriors.csv").exists());
}
