use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tsne-limits"))
}

#[test]
fn persisted_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = bin()
        .args(["--out", a.to_str().unwrap(), "embed", "--n", "60", "--steps", "20", "--record-every", "5"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 20);
    let cfg = a.join("embed.config.toml");
    let out = bin().args(["--out", b.to_str().unwrap(), "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success());
    for f in ["trace.csv", "map.csv", "embed.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let trace = fs::read_to_string(a.join("trace.csv")).unwrap();
    let hash = summary["config_hash"].as_str().unwrap();
    assert_eq!(trace.lines().next().unwrap(), format!("# config-hash: {hash}"));
    assert_eq!(trace.lines().count(), 2 + 5);
}

#[test]
fn json_config_and_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"solve1d": {"density": "uniform", "sigma": "1", "grid": 129}}"#).unwrap();
    let out = bin()
        .args(["--out", dir.path().to_str().unwrap(), "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(s["residual"].as_f64().unwrap() < 1e-8);
    assert!((s["consistency"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    let rows = fs::read_to_string(dir.path().join("solve1d.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2 + 129);

    let out = bin()
        .args(["--out", dir.path().to_str().unwrap(), "continuum", "--map", "sine:0.1,3", "--s", "inf"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
    for line in table.lines().skip(2) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[1] - v[2]).abs() < 1e-8);
    }

    let out = bin()
        .args([
            "--out",
            dir.path().to_str().unwrap(),
            "consistency",
            "--mode",
            "repulsion",
            "--ns",
            "100,200",
            "--trials",
            "3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((s["target"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn failures_emit_machine_readable_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["sample", "--density", "mixture:2,0.1,0.5"],
        &["nonlocal", "--h-sweep", "0.0001", "--nodes", "64"],
        &["microstructure", "--bins-per-unit", "0", "--kmax", "4", "--samples", "10"],
        &[],
    ];
    for args in cases {
        let out = bin().args(["--out", dir.path().to_str().unwrap()]).args(args).output().unwrap();
        assert!(!out.status.success(), "{args:?}");
        let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
        assert!(err["error"].is_string() && err["message"].is_string(), "{args:?}");
    }
}
