//! End-to-end runs of the `hiernav` binary against temp files.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn hiernav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiernav"))
        .args(args)
        .output()
        .expect("spawn hiernav")
}

fn run_ok(args: &[&str]) -> String {
    let out = hiernav(args);
    assert!(
        out.status.success(),
        "hiernav {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(args: &[&str]) -> i32 {
    hiernav(args).status.code().expect("exit code")
}

fn write(path: &Path, contents: &str) {
    std::fs::write(path, contents).unwrap();
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn prune_splices_chains_and_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("h.tsv");
    let once = dir.path().join("once.tsv");
    let twice = dir.path().join("twice.tsv");
    write(&input, "r\t-\na\tr\nx\ta\nb\tr\ny\tb\nz\tb\n");
    run_ok(&[
        "hierarchy",
        "prune",
        "--in",
        input.to_str().unwrap(),
        "--out",
        once.to_str().unwrap(),
    ]);
    let pruned = read(&once);
    assert!(pruned.contains("x\tr"), "chain r>a>x should splice to r>x: {pruned}");
    assert!(!pruned.contains("\na\t"), "single-child node a should be gone");
    run_ok(&[
        "hierarchy",
        "prune",
        "--in",
        once.to_str().unwrap(),
        "--out",
        twice.to_str().unwrap(),
    ]);
    assert_eq!(pruned, read(&twice));
}

#[test]
fn stats_reports_counts() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("h.tsv");
    write(&input, "r\t-\na\tr\nb\tr\nx\ta\ny\ta\n");
    let out = run_ok(&["hierarchy", "stats", "--in", input.to_str().unwrap()]);
    assert!(out.contains("nodes: 5"));
    assert!(out.contains("leaves: 3"));
    assert!(out.contains("internal: 2"));
    assert!(out.contains("max_depth: 2"));
}

#[test]
fn gen_train_calibrate_infer_eval_pipeline() {
    let dir = TempDir::new().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    run_ok(&[
        "data", "gen",
        "--branching", "2,2",
        "--dim", "6",
        "--level-scales", "3,1.5",
        "--noise", "0.3",
        "--per-leaf", "16",
        "--seed", "11",
        "--out-hierarchy", &p("h.tsv"),
        "--out-data", &p("data.tsv"),
    ]);
    run_ok(&[
        "train",
        "--hierarchy", &p("h.tsv"),
        "--data", &p("data.tsv"),
        "--val", &p("data.tsv"),
        "--alpha", "1.0",
        "--beta", "0.2",
        "--epochs", "12",
        "--batch-size", "16",
        "--lr", "0.1",
        "--seed", "3",
        "--out", &p("model.json"),
        "--log", &p("log.csv"),
    ]);
    let log = read(&dir.path().join("log.csv"));
    assert!(log.starts_with("epoch,lr,train_loss,val_accuracy"));
    assert_eq!(log.lines().count(), 13);

    run_ok(&[
        "calibrate",
        "--hierarchy", &p("h.tsv"),
        "--model", &p("model.json"),
        "--data", &p("data.tsv"),
        "--tnr", "0.9",
        "--mode", "node",
        "--out", &p("thresholds.csv"),
    ]);
    assert!(read(&dir.path().join("thresholds.csv"))
        .starts_with("node_name,threshold,tnr_target,mode,score_kind"));

    run_ok(&[
        "score",
        "--hierarchy", &p("h.tsv"),
        "--model", &p("model.json"),
        "--data", &p("data.tsv"),
        "--out", &p("scores.csv"),
    ]);
    let scores = read(&dir.path().join("scores.csv"));
    assert!(scores.starts_with("sample_index,predicted_leaf_name,path_prob,h_mean,h_min"));
    assert_eq!(scores.lines().count(), 65);

    run_ok(&[
        "infer",
        "--hierarchy", &p("h.tsv"),
        "--model", &p("model.json"),
        "--data", &p("data.tsv"),
        "--thresholds", &p("thresholds.csv"),
        "--out", &p("preds.csv"),
    ]);
    let preds = read(&dir.path().join("preds.csv"));
    assert!(preds.starts_with("sample_index,node_name"));

    // Labels straight from the dataset file.
    let mut labels = String::from("sample_index,node_name\n");
    for (i, line) in read(&dir.path().join("data.tsv")).lines().skip(1).enumerate() {
        let (leaf, _) = line.split_once('\t').unwrap();
        labels.push_str(&format!("{i},{leaf}\n"));
    }
    write(&dir.path().join("labels.csv"), &labels);
    let eval = run_ok(&[
        "eval",
        "--hierarchy", &p("h.tsv"),
        "--preds", &p("preds.csv"),
        "--labels", &p("labels.csv"),
        "--out-confusion", &p("confusion.csv"),
    ]);
    assert!(eval.contains("samples: 64"));
    assert!(eval.contains("accuracy:"));
    assert!(read(&dir.path().join("confusion.csv")).contains("gt_dist\\pred_dist"));
}

#[test]
fn split_make_writes_band_tagged_nodes() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("h.tsv");
    let out = dir.path().join("split.tsv");
    // Six depth-1 subtrees; prob 0.3 holds out a few while enough leaves
    // survive for the split to be accepted.
    let mut text = String::from("r\t-\n");
    for s in ["a", "b", "c", "d", "e", "f"] {
        text.push_str(&format!("{s}\tr\n{s}1\t{s}\n{s}2\t{s}\n"));
    }
    write(&input, &text);
    run_ok(&[
        "split",
        "make",
        "--hierarchy",
        input.to_str().unwrap(),
        "--bands",
        "coarse:1:1:0.3",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    let split = read(&out);
    assert!(!split.is_empty(), "seed 5 should select at least one subtree");
    for line in split.lines() {
        let (name, g) = line.split_once('\t').unwrap();
        assert_eq!(g, "coarse");
        assert_eq!(name.len(), 1, "only depth-1 nodes are in the band: {name}");
    }
}

#[test]
fn exit_codes_distinguish_validation_from_success() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.tsv");
    // Unknown flag: clap validation error.
    assert_eq!(exit_code(&["hierarchy", "stats", "--bogus"]), 1);
    // Missing input file: validation error.
    assert_eq!(
        exit_code(&["hierarchy", "stats", "--in", missing.to_str().unwrap()]),
        1
    );
    // Malformed hierarchy: validation error.
    let bad = dir.path().join("bad.tsv");
    write(&bad, "a\tb\n");
    assert_eq!(exit_code(&["hierarchy", "stats", "--in", bad.to_str().unwrap()]), 1);
    // Help exits 0.
    assert_eq!(exit_code(&["--help"]), 0);
}
