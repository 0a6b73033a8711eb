use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const NESTED_SIM: &str = r#"
seed = 5

[simulate]
markets = 8
alternatives = 12
periods = 20

[simulate.truth]
beta = [1.0]
alpha = 0.5
sigma_nest = 0.5
nests = 3
theta_rec = [1.0]
confounding = 0.0
reviews_per_period = 0

[model]
kind = "nested"
endogenous = ["ln_within_share"]
instruments = ["rival_sum_x1_nest", "rival_sum_price_nest"]

[model.design]
regressors = ["x1", "price", "rec_trending"]
fixed_effects = ["alt"]

[[instruments.rivals]]
column = "x1"
scope = "nest"

[[instruments.rivals]]
column = "price"
scope = "nest"
"#;

fn sharelens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sharelens"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn run_dir(root: &Path, name: &str) -> PathBuf {
    let dir = root.join(name);
    assert!(dir.is_dir(), "{} missing", dir.display());
    dir
}

fn simulate(root: &Path) -> PathBuf {
    let config = write_config(root, "sim.toml", NESTED_SIM);
    let out = root.join("runs");
    let res = sharelens(&["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    run_dir(&out, "simulate-0001").join("pipeline.toml")
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn coefficient<'a>(report: &'a Value, label: &str) -> &'a Value {
    report["coefficients"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["label"] == label)
        .unwrap_or_else(|| panic!("no coefficient {label}"))
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "bad.toml", "[model]\nkind = \"nested\"\nnestt = true\n");
    let out = tmp.path().join("runs");
    let res = sharelens(&["estimate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("nestt"), "{}", stderr(&res));
    assert!(!out.exists(), "no run directory for an invalid config");

    let good = write_config(tmp.path(), "good.toml", "seed = 1\n");
    let res = sharelens(&["shares", "--config", good.to_str().unwrap(), "--out", out.to_str().unwrap(), "model.nestt=1"]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("nestt"), "{}", stderr(&res));
}

#[test]
fn missing_config_file_is_a_validation_error() {
    let res = sharelens(&["ingest", "--config", "/nonexistent/pipeline.toml"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn simulate_then_nested_estimate_covers_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let pipeline = simulate(tmp.path());
    let out = tmp.path().join("runs");
    let res = sharelens(&[
        "estimate",
        "--config",
        pipeline.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--threads",
        "1",
        "--kind",
        "nested",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let dir = run_dir(&out, "estimate-0001");
    let reports: Value = serde_json::from_slice(&std::fs::read(dir.join("estimate.json")).unwrap()).unwrap();
    let report = &reports[0];
    for (label, truth) in [("x1", 1.0), ("price", -0.5), ("ln_within_share", 0.5)] {
        let c = coefficient(report, label);
        let (est, se) = (c["estimate"].as_f64().unwrap(), c["std_error"].as_f64().unwrap());
        assert!((est - truth).abs() <= 1.96 * se, "{label}: {est} +- {se} misses {truth}");
    }
    let text = std::fs::read_to_string(dir.join("estimate.txt")).unwrap();
    assert!(text.contains("ln_within_share"));
}

#[test]
fn reruns_are_byte_identical_and_leave_prior_runs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let pipeline = simulate(tmp.path());
    let out = tmp.path().join("runs");
    let args = |kind: &'static str| {
        vec![
            "estimate".to_string(),
            "--config".into(),
            pipeline.to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--threads".into(),
            "1".into(),
            "--kind".into(),
            kind.into(),
        ]
    };
    let call = |kind| {
        let mut a = args(kind);
        if kind == "logit" {
            a.extend(["model.endogenous=[]".to_string(), "model.instruments=[]".to_string()]);
        }
        let res = sharelens(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    };
    call("nested");
    let first = run_dir(&out, "estimate-0001");
    let before = snapshot(&first);
    call("nested");
    call("logit");
    let second = run_dir(&out, "estimate-0002");
    let third = run_dir(&out, "estimate-0003");
    assert_eq!(snapshot(&first), before, "a rerun modified an earlier run directory");

    let a = std::fs::read(first.join("estimate.json")).unwrap();
    let b = std::fs::read(second.join("estimate.json")).unwrap();
    assert!(a == b, "identical configs produced different JSON");
    assert_ne!(a, std::fs::read(third.join("estimate.json")).unwrap());

    let manifest = |d: &Path| -> Value { serde_json::from_slice(&std::fs::read(d.join("manifest.json")).unwrap()).unwrap() };
    let (m1, m2) = (manifest(&first), manifest(&second));
    assert_eq!(m1["config_sha256"], m2["config_sha256"]);
    assert_eq!(m1["outputs"], m2["outputs"]);
    assert_ne!(m1["config_sha256"], manifest(&third)["config_sha256"]);
}

#[test]
fn manifest_hashes_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let pipeline = simulate(tmp.path());
    let out = tmp.path().join("runs");
    for sub in ["ingest", "shares", "instruments", "diagnose"] {
        let res = sharelens(&[sub, "--config", pipeline.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"]);
        assert_eq!(code(&res), 0, "{sub}: {}", stderr(&res));
    }
    for sub in ["simulate", "ingest", "shares", "instruments", "diagnose"] {
        let dir = run_dir(&out, &format!("{sub}-0001"));
        let manifest: Value = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["subcommand"], sub);
        assert_eq!(manifest["threads"], 1);
        assert!(manifest["versions"]["sharelens"].is_string());
        assert!(manifest["wall_time_secs"].as_f64().unwrap() >= 0.0);
        let listed: BTreeMap<String, String> = manifest["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|o| (o["path"].as_str().unwrap().to_string(), o["sha256"].as_str().unwrap().to_string()))
            .collect();
        let mut on_disk = snapshot(&dir);
        on_disk.remove("manifest.json");
        assert_eq!(listed.keys().collect::<Vec<_>>(), on_disk.keys().collect::<Vec<_>>(), "{sub}");
        for (name, bytes) in on_disk {
            assert_eq!(listed[&name], hex::encode(Sha256::digest(&bytes)), "{sub}/{name}");
        }
        if sub != "simulate" {
            assert!(!manifest["inputs"].as_array().unwrap().is_empty(), "{sub} records its inputs");
        }
    }
}

#[test]
fn failed_diagnostics_exit_with_threshold_code() {
    let tmp = tempfile::tempdir().unwrap();
    let pipeline = simulate(tmp.path());
    let out = tmp.path().join("runs");
    let res = sharelens(&[
        "diagnose",
        "--config",
        pipeline.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "diagnostics.min_first_stage_f=1e9",
    ]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    let dir = run_dir(&out, "diagnose-0001");
    assert!(dir.join("manifest.json").exists());
    assert!(std::fs::read_to_string(dir.join("diagnostics.txt")).unwrap().contains("FAIL"));
}

#[test]
fn quantile_estimates_one_report_per_tau() {
    let tmp = tempfile::tempdir().unwrap();
    let pipeline = simulate(tmp.path());
    let out = tmp.path().join("runs");
    let res = sharelens(&[
        "estimate",
        "--config",
        pipeline.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--kind",
        "quantile",
        "--taus",
        "0.25,0.5,0.75",
        "model.endogenous=[]",
        "model.instruments=[]",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let reports: Value =
        serde_json::from_slice(&std::fs::read(run_dir(&out, "estimate-0001").join("estimate.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);
}

#[test]
fn runtime_failures_exit_with_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(
        tmp.path(),
        "c.toml",
        r#"
[data]
panel = "absent.csv"
[data.schema]
market = "m"
alt = "a"
period = "t"
quantity = "q"
price = "p"
nest = "g"
[data.market_size]
policy = "population"
column = "size"
"#,
    );
    let res = sharelens(&["ingest", "--config", config.to_str().unwrap(), "--out", tmp.path().join("runs").to_str().unwrap()]);
    assert_eq!(code(&res), 1, "{}", stderr(&res));
}
