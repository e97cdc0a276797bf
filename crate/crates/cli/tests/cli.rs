use std::path::PathBuf;
use std::process::{Command, Output};

fn ldusim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldusim")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("ldusim-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn list_names_every_scenario() {
    let out = ldusim(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["table2", "table1", "ramsey_fig2c", "antitrap_fig6", "hyperfine_sec2c", "teleport_fig4", "bell_fig8", "ancilla_loss_appendix", "swap_refill"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name}");
    }
}

#[test]
fn run_persists_results_document() {
    let dir = scratch("run");
    let path = dir.join("r.json");
    let out = ldusim(&["run", "table2", "--shots", "2000", "--seed", "7", "--engine", "both", "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(doc["schema"], "ldu-results/v1");
    assert_eq!(doc["config"]["seed"], 7);
    assert_eq!(doc["config"]["shots"], 2000);
    // rerunning reproduces everything except the timing
    let path2 = dir.join("r2.json");
    assert!(ldusim(&["run", "table2", "--shots", "2000", "--seed", "7", "--engine", "both", "--workers", "2", "--out", path2.to_str().unwrap()])
        .status
        .success());
    let mut a: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let mut b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path2).unwrap()).unwrap();
    a["wall_clock_seconds"] = 0.into();
    b["wall_clock_seconds"] = 0.into();
    assert_eq!(a, b);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn overrides_reach_the_model_without_touching_calibration() {
    let dir = scratch("set");
    let path = dir.join("r.json");
    let out = ldusim(&["run", "bell_fig8", "--shots", "300", "--engine", "density", "--profile", "noiseless", "--set", "f2q=1.0", "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(doc["config"]["noise"]["f2q"], 1.0);
    let bell1 = doc["sections"].as_array().unwrap().iter().find(|s| s["name"] == "bell/1").unwrap();
    let f = bell1["metrics"].as_array().unwrap().iter().find(|m| m["name"] == "fidelity").unwrap()["value"].as_f64().unwrap();
    assert!((f - 1.0).abs() < 1e-4, "{f}");
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = scratch("config");
    let cfg = dir.join("c.toml");
    std::fs::write(&cfg, "schema = \"ldu-config/v1\"\nscenario = \"swap_refill\"\nshots = 50\nseed = 3\nengine = \"traj\"\n[noise]\nf2q = 0.99\n").unwrap();
    let path = dir.join("r.json");
    let out = ldusim(&["run", "swap_refill", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(doc["config"]["seed"], 4);
    assert_eq!(doc["config"]["shots"], 50);
    assert_eq!(doc["config"]["engine"], "traj");
    assert_eq!(doc["config"]["noise"]["f2q"], 0.99);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn errors_exit_nonzero_with_message() {
    for args in [
        vec!["run", "table3"],
        vec!["run", "table2", "--bogus"],
        vec!["run", "table2", "--set", "f2q=7"],
        vec!["run", "table2", "--set", "warp=1"],
        vec!["run", "table2", "--engine", "quantum"],
        vec!["emit-scan", "table2", "--engine", "density"],
        vec!["verify", "--only", "12"],
        vec!["frobnicate"],
    ] {
        let out = ldusim(&args);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn emit_scan_writes_csv() {
    let dir = scratch("scan");
    let out = ldusim(&["emit-scan", "teleport_fig4", "--engine", "density", "--dir", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("teleport_fringe_-x.density.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# ldu-scan v1"));
    assert_eq!(lines.next(), Some("phi_rad,n,k"));
    assert_eq!(lines.count(), 16);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn verify_subset_passes() {
    let out = ldusim(&["verify", "--only", "1,2,10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 3);
}
