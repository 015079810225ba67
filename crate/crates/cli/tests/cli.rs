use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mdgnn_core::graph;

fn mdgnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdgnn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn sha_lines(o: &Output) -> Vec<String> {
    stdout(o).lines().filter(|l| l.starts_with("sha256")).map(str::to_owned).collect()
}

#[test]
fn generate_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdgnn(&["generate", "--seed", "4", "--out", "data"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let g = graph::load(&dir.path().join("data")).unwrap();
    assert_eq!(g.n_days(), 40);
    assert_eq!(g.snapshots[0].n_stocks(), 10);
    assert!(stdout(&o).contains("SB edges"));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = mdgnn(&["generate", "--seed", "9", "--out", "a"], dir.path());
    let b = mdgnn(&["generate", "--seed", "9", "--out", "b"], dir.path());
    let c = mdgnn(&["generate", "--seed", "10", "--out", "c"], dir.path());
    assert_eq!(sha_lines(&a).len(), 3);
    assert_eq!(sha_lines(&a), sha_lines(&b));
    assert_ne!(sha_lines(&a), sha_lines(&c));
    for f in [graph::SNAPSHOTS_FILE, graph::PRICES_FILE, graph::BENCHMARK_FILE] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn csi100_like_preset_has_its_entity_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdgnn(
        &["generate", "--set", "preset=csi100-like", "--set", "dataset.market.days=25", "--out", "d"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("25 days, 100 stocks, 196 banks, 97 industries"));
}

#[test]
fn invalid_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"model": {"d_h": 0}}"#).unwrap();
    let o = mdgnn(&["backtest", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = mdgnn(&["generate", "--set", "model.no_such_field=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = mdgnn(&["generate", "--config", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdgnn(&["backtest", "--set", "dataset.path=nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
}

#[test]
fn check_passes_on_the_toy_market() {
    let dir = tempfile::tempdir().unwrap();
    let o = mdgnn(&["check"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 5);
}

#[test]
fn quick_backtest_and_train_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(mdgnn(&["generate", "--out", "data"], dir.path()).status.success());
    let quick = ["--set", "dataset.path=data", "--set", "train.epochs=3", "--set", "model.d_h=8"];
    let o = mdgnn(&[&["backtest", "--out", "bt"][..], &quick].concat(), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "series.csv", "folds.json", "fusion.csv", "model.mdgp", "model.json"] {
        assert!(dir.path().join("bt").join(f).is_file(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("bt/report.json")).unwrap()).unwrap();
    assert!(report.get("aggregates").is_some());

    let o = mdgnn(&[&["train", "--out", "tr"][..], &quick].concat(), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.mdgp", "model.json", "curve.json", "fusion.csv"] {
        assert!(dir.path().join("tr").join(f).is_file(), "{f}");
    }
}
