use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn morphwalk(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphwalk"))
        .current_dir(dir)
        .args(args)
        .env_remove("MORPHWALK_THREADS")
        .output()
        .unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn oracle_three_states() {
    let dir = tempfile::tempdir().unwrap();
    let out = morphwalk(dir.path(), &["diag", "oracle", "--states", "3", "--out", "o.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = read_json(&dir.path().join("o.json"));
    let flow = v["result"]["singleton_flow"][0].as_f64().unwrap();
    assert!((flow - 1.0 / 6.0).abs() < 1e-12);
    assert_eq!(v["result"]["pass"], Value::Bool(true));
    for key in ["version", "seed", "chain_seed", "config", "config_text", "command"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn zero_potential_archive_verifies_exactly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "potential = \"0\"\n[domain]\nkind = \"ball\"\n[grid]\nh = 0.05\n[flow]\nsteps = 4\n").unwrap();
    let out = morphwalk(dir.path(), &["flow", "build", "--config", "c.toml", "--out", "m.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = morphwalk(dir.path(), &["flow", "verify", "--config", "c.toml", "--archive", "m.csv", "--out", "v.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = read_json(&dir.path().join("v.json"));
    assert_eq!(v["result"]["max_abs_det_dev"].as_f64(), Some(0.0));
}

#[test]
fn unknown_key_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[chain]\nradius = 0.2\n").unwrap();
    let out = morphwalk(dir.path(), &["sample", "run", "--config", "c.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("radius"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(morphwalk(dir.path(), &["diag", "--bogus"]).status.code(), Some(1));
    assert_eq!(morphwalk(dir.path(), &["nonsense"]).status.code(), Some(1));
    assert_eq!(morphwalk(dir.path(), &["sample", "run", "--config", "missing.toml"]).status.code(), Some(1));
    std::fs::write(dir.path().join("c.toml"), "[chain]\nr = -1.0\n").unwrap();
    assert_eq!(morphwalk(dir.path(), &["sample", "run", "--config", "c.toml"]).status.code(), Some(1));
}

#[test]
fn blow_up_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    // one step of a fast flow carries seeds past the pad
    std::fs::write(
        dir.path().join("c.toml"),
        "potential = \"10*(x^2-y^2)\"\n[domain]\nkind = \"ball\"\n[grid]\nh = 0.05\n[flow]\nsteps = 1\n",
    )
    .unwrap();
    let out = morphwalk(dir.path(), &["flow", "build", "--config", "c.toml"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn seed_flag_overrides_config_and_csv_has_headers() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "seed = 1\n[chain]\nsteps = 20\nchains = 3\n").unwrap();
    let a = morphwalk(dir.path(), &["sample", "run", "--config", "c.toml", "--out", "a.csv"]);
    let b = morphwalk(dir.path(), &["sample", "run", "--config", "c.toml", "--seed", "2", "--out", "b.csv"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    let a = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert!(a.starts_with("# version: "));
    assert!(a.lines().any(|l| l == "# seed: 1"));
    assert!(b.lines().any(|l| l == "# seed: 2"));
    assert!(a.lines().any(|l| l.starts_with("chain,t,x,y,accepted")));
    let body = |s: &str| s.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    assert_ne!(body(&a), body(&b));
    assert_eq!(read_json(&dir.path().join("b.json"))["seed"], Value::from(2));
}

#[test]
fn thread_count_does_not_change_samples() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[chain]\nsteps = 50\nchains = 8\n").unwrap();
    let one = morphwalk(dir.path(), &["sample", "run", "--config", "c.toml", "--threads", "1", "--out", "one.csv"]);
    let auto = Command::new(env!("CARGO_BIN_EXE_morphwalk"))
        .current_dir(dir.path())
        .args(["sample", "run", "--config", "c.toml", "--out", "many.csv"])
        .env("MORPHWALK_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(auto.status.code(), Some(0));
    assert_eq!(
        std::fs::read(dir.path().join("one.csv")).unwrap(),
        std::fs::read(dir.path().join("many.csv")).unwrap()
    );
}
