use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_voltguard"));
    for a in args {
        cmd.arg(a);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn inspect_chain_prints_x() {
    let o = run(&[&"net", &"inspect", &data("chain.json"), &"--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let x = v["x_controlled"].as_array().expect("x matrix");
    let rows: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|e| e.as_f64().unwrap()).collect())
        .collect();
    let want = [[0.2, 0.2], [0.2, 0.6]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((rows[i][j] - want[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn inspect_three_phase_lists_dominance() {
    let o = run(&[&"net", &"inspect", &data("feeder13_3ph.json")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).to_lowercase().contains("dominan"));
}

#[test]
fn cyclic_network_exits_2_naming_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(data("chain.json")).unwrap()).unwrap();
    v["lines"].as_array_mut().unwrap().push(serde_json::json!({"from": 2, "to": 0, "r_pu": 0.1, "x_pu": 0.1}));
    let path = dir.path().join("cyclic.json");
    fs::write(&path, v.to_string()).unwrap();
    let o = run(&[&"net", &"inspect", &path]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cycle: "), "{}", stderr(&o));
    assert!(stderr(&o).contains(" -> "), "{}", stderr(&o));
}

#[test]
fn certify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[&"policy", &"init", &data("chain.json"), &"--out", &dir.path()]);
    let ckpt = dir.path().join("policy.json");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(&[&"certify", &data("chain.json"), &ckpt, &"--dt", &"0.01", &"--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cert: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let dt_max = cert["dt_max"].as_f64().unwrap();
    let above = format!("{}", dt_max * 1.05);
    let o = run(&[&"certify", &data("chain.json"), &ckpt, &"--dt", &above]);
    assert_eq!(o.status.code(), Some(1));
    // Exponential mode reports a smaller dt_max.
    let o = run(&[&"certify", &data("chain.json"), &ckpt, &"--dt", &"0.01", &"--exponential", &"0.75", &"--json"]);
    let exp: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(exp["dt_max"].as_f64().unwrap() < dt_max);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"version\": 1}").unwrap();
    let o = run(&[&"certify", &data("chain.json"), &bad]);
    assert_eq!(o.status.code(), Some(2));
    // Checkpoint for a different network.
    let o = run(&[&"certify", &data("feeder13.json"), &ckpt]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_episodes_writes_initial_checkpoint_and_empty_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[&"train", &data("chain.json"), &"--episodes", &"0", &"--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("checkpoints/episode_000000.json").exists());
    let curve = fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1, "{curve}");
    assert_eq!(manifest(&out)["command"][0], "train");
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[&"train", &data("chain.json"), &"--episodes", &"12", &"--checkpoint-every", &"5", &"--seed", &"4", &"--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["curve.csv", "policy.json", "certificates.json", "checkpoints/episode_000005.json", "checkpoints/episode_000012.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(manifest(&a)["config_hash"], manifest(&b)["config_hash"]);
}

#[test]
fn invalid_train_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, "{\"gamma\": 1.5}").unwrap();
    let o = run(&[&"train", &data("chain.json"), &"--config", &cfg, &"--out", &dir.path().join("o")]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&cfg, "{\"no_such_field\": 1}").unwrap();
    let o = run(&[&"train", &data("chain.json"), &"--config", &cfg, &"--out", &dir.path().join("o")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_linear_auto_records_gain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ev");
    let o = run(&[&"eval", &data("chain.json"), &"--linear-auto", &"--generate", &"20", &"--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let g = manifest(&out)["notes"]["linear_auto_gain"].as_f64().unwrap();
    assert!((g - 0.5026).abs() < 1e-4, "{g}");
}

#[test]
fn same_checkpoint_twice_gives_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    run(&[&"policy", &"init", &data("chain.json"), &"--out", &dir.path()]);
    let ckpt = dir.path().join("policy.json");
    let out = dir.path().join("ev");
    let o = run(&[&"eval", &data("chain.json"), &"--checkpoint", &ckpt, &"--checkpoint", &ckpt, &"--generate", &"30", &"--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    let plain: Vec<&serde_json::Value> = rows.iter().filter(|r| r["starred"] == false).collect();
    assert_eq!(plain.len(), 2);
    let strip = |r: &serde_json::Value| {
        let mut r = r.clone();
        r.as_object_mut().unwrap().remove("policy");
        r
    };
    assert_eq!(strip(plain[0]), strip(plain[1]));
}

#[test]
fn nonlinear_and_linear_env_differ_by_small_gap() {
    let dir = tempfile::tempdir().unwrap();
    let mut finals = Vec::new();
    for env in ["linear", "nonlinear"] {
        let out = dir.path().join(env);
        let o = run(&[&"eval", &data("feeder13.json"), &"--linear", &"0.3", &"--generate", &"20", &"--env", &env, &"--out", &out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("00_linear_0.3.json")).unwrap()).unwrap();
        finals.push(rep["aggregates"]["transient_cost"]["mean"].as_f64().unwrap());
    }
    assert!(finals[0] != finals[1]);
    assert!((finals[0] - finals[1]).abs() < 0.5 * finals[0].max(finals[1]), "{finals:?}");
}

#[test]
fn replay_missing_column_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    run(&[&"policy", &"init", &data("feeder13.json"), &"--out", &dir.path()]);
    let ckpt = dir.path().join("policy.json");
    let text = fs::read_to_string(data("profile_feeder13.csv")).unwrap();
    let cut: String = text
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    let ts = dir.path().join("ts.csv");
    fs::write(&ts, cut).unwrap();
    let o = run(&[&"replay", &data("feeder13.json"), &ckpt, &ts, &"--out", &dir.path().join("r")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pv_p_kw"), "{}", stderr(&o));
}

#[test]
fn replay_with_certified_policy_stays_in_band() {
    let dir = tempfile::tempdir().unwrap();
    run(&[&"policy", &"init", &data("feeder13.json"), &"--slope", &"2", &"--out", &dir.path()]);
    let ckpt = dir.path().join("policy.json");
    let o = run(&[&"certify", &data("feeder13.json"), &ckpt]);
    assert_eq!(o.status.code(), Some(0));
    let out = dir.path().join("r");
    let o = run(&[&"replay", &data("feeder13.json"), &ckpt, &data("profile_feeder13.csv"), &"--out", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("traces.plot.csv").exists());
    assert!(out.join("replay.json").exists());
    let frac = manifest(&out)["notes"]["in_band_fraction_after_recovery"].as_f64().expect("fraction in manifest");
    assert!(frac >= 0.99, "{frac}");
}

#[test]
fn every_output_dir_has_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let scen = d.join("sc");
    let o = run(&[&"scenarios", &"generate", &data("chain.json"), &"--count", &"5", &"--out", &scen]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let prof = d.join("prof");
    let o = run(&[&"gen-profile", &data("chain.json"), &"--out", &prof]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mats = d.join("mats");
    let o = run(&[&"net", &"matrices", &data("chain.json"), &"--out", &mats]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for dir in [scen, prof, mats] {
        let m = manifest(&dir);
        assert!(!m["outputs"].as_array().unwrap().is_empty(), "{m}");
        assert_eq!(m["inputs"].as_object().unwrap().len(), 1);
    }
}

#[test]
fn usage_error_exits_2() {
    let o = run(&[&"eval"]);
    assert_eq!(o.status.code(), Some(2));
}
