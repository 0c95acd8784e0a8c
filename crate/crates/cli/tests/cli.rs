use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qrobot::config_space::{Configuration, Node, Output as Symbol};
use qrobot::evolution::{load_state, InitialStateSpec};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn qrobot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrobot")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a variant of the strict example config with `edit` applied.
fn strict_variant(dir: &Path, name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let text = std::fs::read_to_string(configs().join("strict.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    edit(&mut value);
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

#[test]
fn build_run_stats_paths_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let config = configs().join("strict.json");
    let built = qrobot(&["build", "--config", s(&config), "--out", s(out)]);
    assert_eq!(code(&built), 0, "{}", String::from_utf8_lossy(&built.stderr));
    let report = std::fs::read_to_string(out.join("audit.txt")).unwrap();
    assert!(report.starts_with("# config="));
    let deviation: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("unitarity_deviation: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(deviation <= 1e-12);
    assert!(report.contains("injectivity_collisions: 0"));
    let first = std::fs::read(out.join("operator.qrop")).unwrap();

    let again = out.join("again");
    assert_eq!(code(&qrobot(&["build", "--config", s(&config), "--out", s(&again)])), 0);
    assert_eq!(std::fs::read(again.join("operator.qrop")).unwrap(), first);

    let op = out.join("operator.qrop");
    assert_eq!(code(&qrobot(&["run", "--config", s(&config), "--operator", s(&op), "--out", s(out)])), 0);
    let state = load_state(&out.join("state.qrsv")).unwrap();
    let support: Vec<_> = state.state.support().collect();
    assert_eq!(support.len(), 1);
    let cfg = state.state.params().decode(support[0].0).unwrap();
    assert_eq!(cfg, Configuration { y: 5, x: 5, d: 1, s: 2, node: Node::R0, o: Symbol::Ml1, c: 1 });

    let records = std::fs::read_to_string(out.join("records_o.csv")).unwrap();
    let lines: Vec<&str> = records.lines().collect();
    assert!(lines[0].starts_with("# config="));
    assert_eq!(lines[1], "step,o,probability");
    assert_eq!(lines[2], "0,MR1,1");
    assert!(records.contains("11,ML1,1"));

    let stats = qrobot(&["stats", "--config", s(&config), "--state", s(&out.join("state.qrsv")), "--out", s(out)]);
    assert_eq!(code(&stats), 0, "{}", String::from_utf8_lossy(&stats.stderr));
    let csv = std::fs::read_to_string(out.join("distances.csv")).unwrap();
    assert!(csv.lines().any(|l| l == "11,2,1,literal"));
    assert!(csv.lines().nth(1) == Some("k,n,P,variant"));
    let fidelity: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("fidelity.json")).unwrap()).unwrap();
    assert_eq!(fidelity["fidelity"], 1.0);

    assert_eq!(code(&qrobot(&["paths", "--config", s(&config), "--operator", s(&op), "--out", s(out)])), 0);
    let paths: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("paths.json")).unwrap()).unwrap();
    let list = paths["paths"].as_array().unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0]["t"], 5);
    assert_eq!(paths["config_hash"], fidelity["config_hash"]);
}

#[test]
fn zero_steps_keeps_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let config = strict_variant(dir.path(), "zero.json", |v| v["run"]["steps"] = 0.into());
    let out = dir.path();
    assert_eq!(code(&qrobot(&["build", "--config", s(&config), "--out", s(out)])), 0);
    let op = out.join("operator.qrop");
    assert_eq!(code(&qrobot(&["run", "--config", s(&config), "--operator", s(&op), "--out", s(out)])), 0);
    let state = load_state(&out.join("state.qrsv")).unwrap();
    let initial = InitialStateSpec::sites(5, 3).build(state.state.params()).unwrap();
    assert_eq!(state.state, initial);
    assert_eq!(state.step, 0);
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad_alpha = strict_variant(dir.path(), "alpha.json", |v| {
        v["kernel"] = serde_json::json!({ "kind": "gaussian", "alpha": 0.0 });
    });
    let typo = strict_variant(dir.path(), "typo.json", |v| v["run"]["stpes"] = 3.into());
    let unnormalized = strict_variant(dir.path(), "norm.json", |v| {
        v["initial"]["robot"] = serde_json::json!({ "list": [{ "site": 1, "amp": [0.5, 0.0] }] });
    });
    for config in [&bad_alpha, &typo, &unnormalized] {
        let out = qrobot(&["build", "--config", s(config), "--out", s(dir.path())]);
        assert_eq!(code(&out), 1, "{}", config.display());
    }
}

#[test]
fn operator_from_another_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let other = strict_variant(out, "other.json", |v| v["memory"]["N"] = 2.into());
    assert_eq!(code(&qrobot(&["build", "--config", s(&other), "--out", s(out)])), 0);
    let config = configs().join("strict.json");
    let run = qrobot(&["run", "--config", s(&config), "--operator", s(&out.join("operator.qrop")), "--out", s(out)]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("different configuration"));
}

#[test]
fn sweep_emits_four_widths_and_strict_row() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs().join("gaussian_sweep.json");
    let run = qrobot(&["sweep", "--config", s(&config), "--out", s(dir.path())]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[4].starts_with("inf,80,3,1,"));
    for row in &rows {
        assert_eq!(row.split(',').nth(2), Some("3"));
    }
}
