use std::path::Path;
use std::process::Command;

fn martinv(args: &[&str], threads: Option<&str>) -> std::process::Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_martinv"));
    c.args(args);
    match threads {
        Some(k) => c.env("MARTINV_THREADS", k),
        None => c.env_remove("MARTINV_THREADS"),
    };
    c.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const PAIRS: &str = r#"{"consistency": {"pairs": [
  {"name": "same", "first": {"kind": "bm", "m0": 0}, "second": {"kind": "bm", "m0": 0}, "b0": 0,
   "gamma": {"kind": "affine", "slope": 1, "intercept": 0}},
  {"name": "control", "first": {"kind": "bm", "m0": 0},
   "second": {"kind": "perturbed", "base": {"kind": "bm", "m0": 0}, "eps": 0.1}, "b0": 0,
   "expect": "__EXPECT__"}
]}}"#;

#[test]
fn consistency_scenario_writes_manifest_and_exit_code_follows_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.json", &PAIRS.replace("__EXPECT__", "inconsistent"));
    let out = dir.path().join("good");
    let o = martinv(&["consistency", "--config", &good, "--out", out.to_str().unwrap()], Some("1"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["scenario"], "consistency");
    assert_eq!(m["pass"], true);
    for f in m["outputs"].as_array().unwrap() {
        let p = out.join(f.as_str().unwrap());
        assert!(std::fs::metadata(&p).unwrap().len() > 0, "{}", p.display());
    }

    // Claiming the perturbed pair is consistent must fail the run.
    let bad = write(dir.path(), "bad.json", &PAIRS.replace("__EXPECT__", "consistent"));
    let o = martinv(&["consistency", "--config", &bad, "--out", dir.path().join("bad").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_override_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "d.json",
        r#"{"digital": {"n_paths": 10000, "dt": 0.01, "record_every": 10, "n_outer": 10, "n_inner": 32, "inner_dt": 0.01}}"#,
    );
    let out = dir.path().join("d");
    let o = martinv(&["digital", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "5"], None);
    assert!(o.status.code().is_some());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["seed"], 5);

    let typo = write(dir.path(), "t.json", r#"{"digitl": {}}"#);
    let o = martinv(&["digital", "--config", &typo, "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("digitl"));
}
