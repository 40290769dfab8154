use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qpath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qpath"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("QPATH_OUT")
        .output()
        .expect("binary runs")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn has_file(m: &Value, name: &str) -> bool {
    m["artifacts"].as_array().unwrap().iter().any(|a| a["file"] == name)
}

#[test]
fn simulate_writes_ensemble() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("sim");
    let o = qpath(&["simulate", "--n", "20", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert!(has_file(&m, "moments.csv"));
    assert_eq!(m["seed"], 3);
    let moments = fs::read_to_string(out.join("moments.csv")).unwrap();
    assert_eq!(moments.lines().count(), 91);
}

#[test]
fn same_seed_same_bytes_across_workers() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    for (dir, w) in [(&a, "1"), (&b, "3")] {
        let o = qpath(&["simulate", "--n", "50", "--workers", w, "--out", dir.to_str().unwrap()]);
        assert!(o.status.success());
    }
    assert_eq!(manifest(&a)["artifacts"], manifest(&b)["artifacts"]);
}

#[test]
fn out_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_qpath"))
        .args(["simulate", "--n", "2"])
        .env("QPATH_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn invalid_parameter_exits_2_and_names_field() {
    let d = tempfile::tempdir().unwrap();
    let o = qpath(&["simulate", "--tau=-1", "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"));
}

#[test]
fn unknown_config_field_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.json");
    fs::write(&cfg, r#"{"tau": 3e-7, "bogus": 1}"#).unwrap();
    let o = qpath(&["simulate", "--config", cfg.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn unreachable_target_exits_3() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.json");
    fs::write(
        &cfg,
        r#"{"solver": {"grid": [0.0], "max_iterations": 0, "scan_seeds": 0, "continuation_steps": 0}}"#,
    )
    .unwrap();
    let o = qpath(&[
        "mlp", "--preset", "fig4", "--config", cfg.to_str().unwrap(), "--T", "4.64e-7",
        "--out", d.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no root"));
}

#[test]
fn mlp_writes_path_and_report() {
    let d = tempfile::tempdir().unwrap();
    let o = qpath(&[
        "mlp", "--preset", "fig4", "--T", "4.64e-7", "--out", d.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = fs::read_to_string(d.path().join("path_T1.csv")).unwrap();
    assert_eq!(path.lines().next().unwrap(), "t,x,z,p_x,p_z,r,energy");
    assert!(has_file(&manifest(d.path()), "mlp_report.json"));
}

#[test]
fn too_few_selected_exits_4() {
    let d = tempfile::tempdir().unwrap();
    let o = qpath(&["figure", "fig4", "--n", "30", "--out", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empirical_mlp"));
}

#[test]
fn unknown_figure_is_config_error() {
    let o = qpath(&["figure", "fig9"]);
    assert_eq!(o.status.code(), Some(2));
}
