use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tcda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcda")).args(args).output().unwrap()
}

fn out_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn lists_experiments() {
    let o = tcda(&["list"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for id in ["fs-physical", "online-cnnb", "tmse-size", "multi-daw"] {
        assert!(text.contains(id), "{text}");
    }
}

#[test]
fn forecast_skill_table_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = tcda(&["run", "fs-physical", "--members", "3", "--seed", "7", "--out", out_arg(d)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ta = fs::read(a.join("fs.csv")).unwrap();
    assert_eq!(ta, fs::read(b.join("fs.csv")).unwrap());
    let text = String::from_utf8(ta).unwrap();
    assert!(text.starts_with("lead_time,fs_mean,fs_std\n0,0,0\n"));
    assert_eq!(text.lines().count(), 1 + 147);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["plan"]["members"], 3);
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nepochz = 3\n").unwrap();
    let o = tcda(&["run", "fs-physical", "--config", out_arg(&cfg), "--out", out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let record: serde_json::Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(record["kind"], "config");
    assert!(record["message"].as_str().unwrap().contains("epochz"));
    assert_eq!(tcda(&["run", "no-such-experiment"]).status.code(), Some(1));
    assert_eq!(tcda(&["run", "fs-physical", "--surrogate", "cnn-z"]).status.code(), Some(1));
    assert_eq!(tcda(&["run", "fs-physical", "--members", "0"]).status.code(), Some(1));
}

#[test]
fn online_run_writes_series_and_loadable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "repetitions = 1\npreliminary = 16\ntest_size = 16\ntmse_every = 8\ncheckpoint_every = 16\nb = 0.4\n").unwrap();
    let out = dir.path().join("out");
    let o = tcda(&["run", "online-cnnb", "--config", out_arg(&cfg), "--cycles", "32", "--out", out_arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let srmse = fs::read_to_string(out.join("srmse.csv")).unwrap();
    assert!(srmse.starts_with("cycle,srmse_mean,srmse_std\n"));
    assert_eq!(srmse.lines().count(), 33);
    let tmse = fs::read_to_string(out.join("tmse.csv")).unwrap();
    assert_eq!(tmse.lines().count(), 1 + 5);
    for cycle in [16, 32] {
        let ck = tcda::io::load_checkpoint(&out.join(format!("checkpoints/rep0-cycle{cycle}.json"))).unwrap();
        assert_eq!(ck.params.len(), 113);
        assert_eq!(ck.meta.index, cycle);
    }
}
