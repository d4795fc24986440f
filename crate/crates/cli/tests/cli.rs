use std::path::Path;
use std::process::Command;

fn dynopf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dynopf")).args(args).env("DYNOPF_THREADS", "1").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dynopf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn case_validate_reports_sizes_and_rejects_garbage() {
    let s = ok(&["case", "validate", "wscc9"]);
    assert!(s.contains("buses 9 lines 9 generators 3"), "{s}");
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = dynopf(&["case", "validate", p(&bad)]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn simulate_steady_state_is_constant_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    let s = ok(&["simulate", "wscc9", "--gen", "1", "--method", "dopri5", "--horizon", "3", "--out", p(dir.path())]);
    assert_eq!(s.trim(), "stable");
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let deltas: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(deltas.len(), 31);
    assert!(deltas.iter().all(|d| (d - deltas[0]).abs() < 1e-9));
    for f in ["config.json", "VERSION", "verdict.json", "dispatch.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&["gen-data", "wscc9", "--n", "100", "--perturb", "0.2", "--seed", "7", "--out", p(d.path())]);
    }
    for f in ["opf.csv", "opf.manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    // Snapshots differ only in the output directory they record.
    let snapshot = |d: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("config.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("output");
        v
    };
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
}

#[test]
fn end_to_end_small_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let nodes = root.path().join("nodes");
    let run = root.path().join("run");
    ok(&["gen-data", "wscc9", "--n", "40", "--seed", "3", "--out", p(&data)]);
    let cfg = root.path().join("base.json");
    std::fs::write(&cfg, r#"{"node": {"hidden": [8, 8], "substeps": 1}, "node_train": {"batch": 16}}"#).unwrap();
    for g in ["0", "1", "2"] {
        ok(&["gen-node-data", "wscc9", "--gen", g, "--n", "40", "--seed", "1", "--out", p(&nodes)]);
        ok(&["train-node", "wscc9", "--gen", g, "--data", p(&nodes), "--epochs", "2", "--config", p(&cfg), "--out", p(&nodes)]);
    }
    ok(&[
        "train", "wscc9", "--mode", "dynopf", "--data", p(&data), "--node-ckpts", p(&nodes), "--epochs", "2", "--config",
        p(&cfg), "--out", p(&run),
    ]);
    let log = std::fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let report = ok(&["evaluate", p(&run)]);
    assert!(report.contains("unstable_pct"));
    for f in ["report.json", "report.csv", "trajectories.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let bench = ok(&["bench", p(&run), "--repeats", "1"]);
    assert!(bench.contains("proxy+surrogates"));
    assert!(!run.join("FAILED").exists());
}

#[test]
fn failures_exit_nonzero_and_mark_output() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path()).unwrap();
    let out = dynopf(&["train", "wscc9", "--mode", "dynopf", "--data", p(&dir.path().join("missing")), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(dir.path().join("FAILED").exists());
    assert!(!dynopf(&["train", "wscc9", "--mode", "dc3", "--data", "x", "--out", "y"]).status.success());
}
