use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn attrmine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attrmine"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn attrmine")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// A small synthetic dataset with its generated config file.
struct Dataset {
    _dir: TempDir,
    root: PathBuf,
}

impl Dataset {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let out = attrmine(&["--seed", "3", "synth", "--out", root.to_str().unwrap(), "--products", "300"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Dataset { _dir: dir, root }
    }

    fn config(&self) -> String {
        self.root.join("config.toml").to_str().unwrap().to_owned()
    }

    fn workdir(&self) -> PathBuf {
        self.root.join("work")
    }

    /// Runs a subcommand with the dataset config and a short pretraining.
    fn run(&self, args: &[&str]) -> Output {
        let config = self.config();
        let mut all = vec!["--config", config.as_str(), "--set", "pretrain.steps=100"];
        all.extend_from_slice(args);
        attrmine(&all)
    }
}

fn iteration_dirs(workdir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(workdir)
        .unwrap()
        .flatten()
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("iter_"))
        .collect();
    names.sort();
    names
}

fn predictions(workdir: &Path, k: usize) -> (Vec<u8>, Vec<u8>) {
    let dir = workdir.join(format!("iter_{k}/predictions"));
    (
        std::fs::read(dir.join("clusters.json")).unwrap(),
        std::fs::read(dir.join("values.tsv")).unwrap(),
    )
}

#[test]
fn config_errors_exit_with_two() {
    let out = attrmine(&["--set", "no.such.key=1", "pretrain"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no.such.key"));

    // no corpus configured
    assert_eq!(code(&attrmine(&["pretrain"])), 2);

    let data = Dataset::new();
    assert_eq!(code(&data.run(&["--set", "clustering.eps=3", "run"])), 2);
    assert_eq!(code(&data.run(&["--set", "discovery.eps_selection=\"sometimes\"", "run"])), 2);
    // evaluation needs gold clusters
    let corpus = data.root.join("corpus.jsonl");
    let seeds = data.root.join("seeds.json");
    let out = attrmine(&["--corpus", corpus.to_str().unwrap(), "--seeds", seeds.to_str().unwrap(), "run", "--eval"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&attrmine(&["frobnicate"])), 2);
    assert_eq!(code(&attrmine(&["--backend", "gpu", "pretrain"])), 2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\": \"p1\", \"title\": \n").unwrap();
    let out = attrmine(&["--corpus", broken.to_str().unwrap(), "pretrain"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn single_iteration_run_and_follow_up_commands() {
    let data = Dataset::new();
    let out = data.run(&["--max-iter", "1", "run", "--eval"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("iteration 1:") && stdout.contains("ARI"));
    let wd = data.workdir();
    assert_eq!(iteration_dirs(&wd), vec!["iter_1"]);
    for f in [
        "pretrain/encoder.json",
        "pretrain/loss.jsonl",
        "candidates/candidates.jsonl",
        "candidates/threshold.json",
        "iter_1/checkpoint/encoder.json",
        "iter_1/trainset/pairs.tsv",
        "iter_1/predictions/clusters.json",
        "iter_1/predictions/values.tsv",
        "iter_1/metrics/summary.json",
        "iter_1/metrics/metrics.csv",
    ] {
        assert!(wd.join(f).is_file(), "missing {f}");
    }
    let values = std::fs::read_to_string(wd.join("iter_1/predictions/values.tsv")).unwrap();
    assert!(values.starts_with("type\tcluster_id\tvalue\tconfidence\tprovenance\n"));

    let out = data.run(&["eval"]);
    assert_eq!(code(&out), 0);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.starts_with("type\tmetric\tvalue\tn_labeled"));
    assert!(table.contains("*\tari\t"));

    let product_type = std::fs::read_to_string(data.root.join("corpus.jsonl")).unwrap();
    let product_type = product_type.split("\"product_type\":\"").nth(1).unwrap().split('"').next().unwrap().to_owned();
    let out = data.run(&["project", "--type", &product_type]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let projection = std::fs::read_to_string(wd.join(format!("projection_{product_type}.tsv"))).unwrap();
    let mut lines = projection.lines();
    assert_eq!(lines.next(), Some("value\tattribute\tx\ty"));
    assert!(lines.count() > 0);

    assert_eq!(code(&data.run(&["project", "--type", "no-such-type"])), 1);
    assert_eq!(code(&data.run(&["eval", "--iteration", "7"])), 1);
}

#[test]
fn resumed_run_matches_fresh_run() {
    let data = Dataset::new();
    let wd = data.workdir();
    assert_eq!(code(&data.run(&["--max-iter", "2", "run"])), 0);
    let fresh: Vec<_> = iteration_dirs(&wd).iter().enumerate().map(|(i, _)| predictions(&wd, i + 1)).collect();
    let checkpoint = std::fs::read(wd.join("pretrain/encoder.json")).unwrap();

    let out = data.run(&["--max-iter", "2", "run", "--resume"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let resumed: Vec<_> = iteration_dirs(&wd).iter().enumerate().map(|(i, _)| predictions(&wd, i + 1)).collect();
    assert!(!fresh.is_empty());
    assert_eq!(fresh, resumed);
    assert_eq!(std::fs::read(wd.join("pretrain/encoder.json")).unwrap(), checkpoint);

    // a shorter rerun leaves no stale iteration behind
    assert_eq!(code(&data.run(&["--max-iter", "1", "run", "--resume"])), 0);
    assert_eq!(iteration_dirs(&wd), vec!["iter_1"]);
}

#[test]
fn candidates_with_fixed_threshold() {
    let data = Dataset::new();
    assert_eq!(code(&data.run(&["pretrain"])), 0);
    let out = data.run(&["candidates", "--threshold", "0.5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("threshold\t0.5000\n"));
    assert!(data.workdir().join("candidates/candidates.jsonl").is_file());
}
