use std::path::Path;
use std::process::{Command, Output};

fn eqhjb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqhjb")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn negative_sigma_is_a_config_error_with_no_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "[model.lq]\nsigma = -0.5\n");
    let out = tmp.path().join("out");
    let o = eqhjb(&["solve-lq", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn unknown_keys_and_mismatched_commands_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let typo = write(tmp.path(), "typo.toml", "[grid]\nnt = 100\n");
    assert_eq!(eqhjb(&["solve-lq", "--config", &typo, "--out", out.to_str().unwrap()]).status.code(), Some(2));
    let other = write(tmp.path(), "other.toml", "command = \"solve-merton\"\n");
    assert_eq!(eqhjb(&["solve-lq", "--config", &other, "--out", out.to_str().unwrap()]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn classical_merton_records_no_inconsistency() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "m.toml", "[model.merton]\ndiscount = \"exponential\"\nrate = 0.2\n");
    let out = tmp.path().join("m");
    let o = eqhjb(&["solve-merton", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["results"]["inconsistency_indicator"], serde_json::Value::Bool(false));
    assert_eq!(m["config"]["model"]["merton"]["rate"], 0.2);
    assert!(out.join("merton_z.csv").exists());
    assert!(out.join("timings.json").exists());

    let hyper = write(tmp.path(), "h.toml", "[model.merton]\ndiscount = \"hyperbolic\"\nrate = 1.0\n");
    let out = tmp.path().join("h");
    assert_eq!(eqhjb(&["solve-merton", "--config", &hyper, "--out", out.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(manifest(&out)["results"]["inconsistency_indicator"], serde_json::Value::Bool(true));
}

#[test]
fn inconsistency_report_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "v.toml", "command = \"verify-inconsistency\"\n[mc]\nn_paths = 4000\ndt = 0.005\ndump_paths = true\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = eqhjb(&["verify-inconsistency", "--config", &cfg, "--seed", "7", "--out", a.to_str().unwrap()]);
    let ob = eqhjb(&["verify-inconsistency", "--config", &cfg, "--seed", "7", "--threads", "2", "--out", b.to_str().unwrap()]);
    assert_eq!(oa.status.code(), ob.status.code());
    for f in ["inconsistency.json", "paths.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("inconsistency.json")).unwrap()).unwrap();
    assert!(report["gap_estimate"].as_f64().unwrap() > 0.0);
    assert!(report["agrees_with_closed_form"].is_boolean());
    assert_eq!(manifest(&a)["config"]["seed"], 7);
}

#[test]
fn both_riccati_solvers_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "l.toml", "[grid]\nn_t = 64\n");
    let mut diag = Vec::new();
    for mode in ["marching", "fixed-point"] {
        let out = tmp.path().join(mode);
        let o = eqhjb(&["solve-lq", "--config", &cfg, "--solver", mode, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(manifest(&out)["config"]["solver"]["mode"], mode);
        diag.push(manifest(&out)["results"]["p_diag_at_0"].as_f64().unwrap());
    }
    assert!((diag[0] - diag[1]).abs() < 1e-9, "{diag:?}");
}

#[test]
fn grid_solver_and_studies_report_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "h.toml", "[model.lq]\nsigma = 0.3\n[grid]\nn_t = 128\nm = 120\n");
    for cmd in ["solve-hjb", "partition-game", "convergence-study"] {
        let out = tmp.path().join(cmd);
        let o = eqhjb(&[cmd, "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stdout));
        assert_eq!(manifest(&out)["passed"], true);
    }
    let spike = write(tmp.path(), "s.toml", "[mc]\nn_paths = 2000\ndt = 0.005\n");
    let out = tmp.path().join("spike");
    let o = eqhjb(&["spike-test", "--config", &spike, "--out", out.to_str().unwrap()]);
    assert!(matches!(o.status.code(), Some(0) | Some(4)));
    assert!(out.join("spike.csv").exists());
}
