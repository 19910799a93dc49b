use std::path::Path;
use std::process::{Command, Output};

fn dci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dci"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write_labels(dir: &Path, n: usize) -> String {
    let p = dir.join("labels.txt");
    let body: Vec<String> = (0..n).map(|i| format!("class-{i:05}")).collect();
    std::fs::write(&p, body.join("\n")).unwrap();
    p.display().to_string()
}

#[test]
fn classify_with_oracle_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let labels = write_labels(dir.path(), 100);
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[oracle]\nsignal_boost_delta = inf\n").unwrap();
    let trace = dir.path().join("trace.json");
    let o = dci(&[
        "classify", "--image", "img.png", "--labels", &labels, "--config",
        cfg.to_str().unwrap(), "--k", "10", "--true-label", "class-00042",
        "--trace-out", trace.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("prediction: class-00042"), "{out}");
    assert!(out.contains("calls: 10"), "{out}");

    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(t["final"]["label"], "class-00042");
    assert_eq!(t["total_calls"], 10);
    assert_eq!(t["iterations"].as_array().unwrap().len(), 1);
}

#[test]
fn classify_flat_makes_one_call() {
    let dir = tempfile::tempdir().unwrap();
    let labels = write_labels(dir.path(), 30);
    let o = dci(&["classify", "--image", "x", "--labels", &labels, "--flat", "--true-label", "class-00003"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("calls: 1"));
}

#[test]
fn classify_rejects_missing_or_unknown_truth() {
    let dir = tempfile::tempdir().unwrap();
    let labels = write_labels(dir.path(), 5);
    let o = dci(&["classify", "--image", "x", "--labels", &labels]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--true-label"));

    let o = dci(&["classify", "--image", "x", "--labels", &labels, "--true-label", "zebra"]);
    assert_eq!(o.status.code(), Some(1));

    let o = dci(&["classify", "--image", "x", "--labels", &labels, "--true-label", "class-00001", "--k", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let o = dci(&["analyze", "cost", "--n", "10"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dci(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("exp.toml");
    std::fs::write(
        &spec,
        "[experiment]\nkind = \"k_ablation\"\nlabel_space_sizes = [40]\nk_values = [4, 8]\ntrials = 20\n",
    )
    .unwrap();
    let out = dir.path().join("r.csv");
    let o = dci(&["evaluate", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("n,k,method,grouping,trials,accuracy_pct"));
    assert_eq!(lines.len(), 1 + 3);

    let o = dci(&["evaluate", "--spec", spec.to_str().unwrap(), "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn evaluate_reports_bad_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("exp.toml");
    std::fs::write(&spec, "[experiment]\nkind = \"pclsr\"\nlabel_space_sizes = [40]\nk_values = [1]\n").unwrap();
    let o = dci(&["evaluate", "--spec", spec.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_cost_table() {
    let o = dci(&["analyze", "cost", "--n", "1000", "--k", "10,50", "--c0", "0", "--c2", "1"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "n,k,cost,flat_cost,in_region");
    // (1000/10 + 3 - 1) * 100 against 10^6
    assert_eq!(lines[1], "1000,10,10200.0000,1000000.0000,true");
    assert_eq!(lines.len(), 3);
}

#[test]
fn analyze_bounds_table() {
    let o = dci(&["analyze", "bounds", "--k", "1000", "--i-max", "3"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    let fano: f64 = row[4].parse().unwrap();
    let expected = 1.0 - (3.0 + 2f64.ln()) / 1000f64.ln();
    assert!((fano - expected).abs() < 1e-6, "{fano}");

    let o = dci(&["analyze", "bounds", "--k", "1000", "--beta", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_dilution() {
    let o = dci(&["simulate", "--k", "10,100", "--trials", "5000", "--seed", "3", "--format", "json"]);
    assert!(o.status.success(), "{o:?}");
    let v: Vec<serde_json::Value> = serde_json::from_str(&stdout(&o)).unwrap();
    for (s, k) in v.iter().zip([10.0, 100.0]) {
        let mean = s["mean"].as_f64().unwrap();
        assert!((mean * k - 1.0).abs() < 0.05, "{mean} for k = {k}");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            dci_core::harness::ExperimentSpec::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
