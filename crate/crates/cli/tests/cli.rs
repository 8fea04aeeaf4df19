use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;
use sha2::{Digest, Sha256};

fn weakode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weakode")).args(args).output().expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn json(p: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

#[test]
fn noiseless_simulation_is_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "r.csv");
    let o = weakode(&["simulate", "--model", "ricatti", "--n", "50", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("t,y1\n"));
    let data = rows(&text);
    let m = weakode::models::model_by_name("ricatti").unwrap();
    let times: Vec<f64> = data.iter().map(|r| r[0]).collect();
    let tr = m.simulate(&m.true_params, &m.initial, &times, &Default::default()).unwrap();
    for (r, s) in data.iter().zip(&tr.states) {
        assert_eq!(r[1], s[0]);
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = path(dir.path(), "a.csv");
    let b = path(dir.path(), "b.csv");
    let c = path(dir.path(), "c.csv");
    for (p, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let o = weakode(&["simulate", "--model", "fitzhugh_nagumo", "--sigma", "0.1", "--seed", seed, "--out", p]);
        assert!(o.status.success());
    }
    let read = |p: &str| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn blowfly_grid_is_every_two_days() {
    let o = weakode(&["simulate", "--model", "blowfly", "--n", "90", "--sigma", "0.05", "--relative-noise"]);
    assert!(o.status.success());
    let data = rows(&String::from_utf8(o.stdout).unwrap());
    assert_eq!(data.len(), 90);
    assert!((data[89][0] - data[0][0] - 178.0).abs() < 1e-9);
    for w in data.windows(2) {
        assert!((w[1][0] - w[0][0] - 2.0).abs() < 1e-9);
    }
}

#[test]
fn oc_recovers_exponential_rate() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(dir.path(), "e.csv");
    let report = path(dir.path(), "rep.json");
    assert!(weakode(&["simulate", "--model", "exponential", "--n", "200", "--out", &data]).status.success());
    let o = weakode(&["estimate", "--data", &data, "--model", "exponential", "--method", "oc", "--out", &report]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&report);
    assert!((r["theta"][0].as_f64().unwrap() - 1.0).abs() < 1e-3);
    assert_eq!(r["method"], "oc");
    // the manifest digests match the files on disk
    let m = json(&path(dir.path(), "rep.manifest.json"));
    for entry in m["inputs"].as_array().unwrap().iter().chain(m["outputs"].as_array().unwrap()) {
        let bytes = std::fs::read(entry["path"].as_str().unwrap()).unwrap();
        assert_eq!(entry["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    assert_eq!(m["command"], "estimate");
}

#[test]
fn nls_from_the_truth_has_zero_sse() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(dir.path(), "r.csv");
    let cfg = path(dir.path(), "nls.toml");
    std::fs::write(
        &cfg,
        "version = 1\n[model]\nname = \"ricatti\"\n[[estimators]]\nlabel = \"NLS\"\nmethod = \"nls\"\nstarts = 1\n",
    )
    .unwrap();
    assert!(weakode(&["simulate", "--model", "ricatti", "--n", "60", "--out", &data]).status.success());
    let report = path(dir.path(), "nls.json");
    let o = weakode(&["estimate", "--data", &data, "--config", &cfg, "--method", "nls", "--out", &report]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&report);
    assert!(r["sse"].as_f64().unwrap() < 1e-20, "{}", r["sse"]);
}

#[test]
fn two_step_reports_unknown_change_point_failure() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(dir.path(), "r.csv");
    let report = path(dir.path(), "ts.json");
    assert!(weakode(&["simulate", "--model", "ricatti_unknown_tr", "--n", "100", "--sigma", "0.2", "--out", &data]).status.success());
    let o = weakode(&["estimate", "--data", &data, "--model", "ricatti_unknown_tr", "--method", "ts", "--out", &report]);
    assert_eq!(o.status.code(), Some(4));
    let r = json(&report);
    assert_eq!(r["kind"], "derivative_proxy_unusable");
}

#[test]
fn exit_codes() {
    assert_eq!(weakode(&["simulate", "--model", "no_such_model"]).status.code(), Some(2));
    assert_eq!(weakode(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bad = path(dir.path(), "bad.csv");
    std::fs::write(&bad, "t,y1\n0,1\n0,2\n").unwrap();
    assert_eq!(weakode(&["estimate", "--data", &bad, "--model", "exponential", "--method", "oc"]).status.code(), Some(3));
    // the smooth Ricatti solution explodes before t = 14 when a is large
    let o = weakode(&["simulate", "--model", "ricatti", "--params", "0.5,0.09,0", "--n", "20"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("blow-up"));
    let cfg = path(dir.path(), "v2.toml");
    std::fs::write(&cfg, "version = 2\n[model]\nname = \"exponential\"\n").unwrap();
    assert_eq!(weakode(&["mc", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn mc_smoke_run_writes_reproducible_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "smoke.toml");
    std::fs::write(
        &cfg,
        r#"version = 1
[model]
name = "exponential"
[data]
n = 100
sigma = 0.05
[[estimators]]
label = "OC"
method = "oc"
members = [3, 5]
[[estimators]]
label = "TS"
method = "ts"
[[estimators]]
label = "NLS"
method = "nls"
starts = 3
[mc]
replicates = 1
seed = 4
"#,
    )
    .unwrap();
    let start = Instant::now();
    let a = path(dir.path(), "a");
    let o = weakode(&["mc", "--config", &cfg, "--out-dir", &a]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("MSE") && table.contains("TrV"));
    for label in ["OC", "TS", "NLS"] {
        assert!(table.lines().any(|l| l.starts_with(&format!("{label}\t"))));
    }
    let b = path(dir.path(), "b");
    assert!(weakode(&["mc", "--config", &cfg, "--out-dir", &b]).status.success());
    let ra = std::fs::read_to_string(Path::new(&a).join("records.tsv")).unwrap();
    let rb = std::fs::read_to_string(Path::new(&b).join("records.tsv")).unwrap();
    assert_eq!(ra, rb);
    let m = json(&path(Path::new(&a), "manifest.json"));
    assert_eq!(m["seed"], 4);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 3);
}
