use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmd")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small dataset that trains in well under a second per epoch.
fn small_data(dir: &Path) -> String {
    let out = vmd(&[
        "synth", "--n", "80", "--seed", "2", "--feature-dim", "12", "--report-dim", "4", "--signal-dims", "2",
        "--mask-noise-dims", "6", "--out", p(dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("data.jsonl").to_str().unwrap().to_string()
}

fn small_config(dir: &Path, epochs: usize) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, format!("[train]\nepochs = {epochs}\nbatch_size = 8\n[model]\nhidden_dims = [8]\nlatent_dim = 4\n")).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_reproducible_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = vmd(&["synth", "--n", "502", "--seed", "7", "--out", p(out)]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
    }
    let data = fs::read_to_string(a.join("data.jsonl")).unwrap();
    assert_eq!(data.lines().count(), 502);
    assert!(a.join("data.meta.json").exists());
    for f in ["data.jsonl", "data.meta.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seeds"], serde_json::json!([7]));
    assert_eq!(manifest["dataset_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn synth_rejects_invalid_spec() {
    let dir = tempfile::tempdir().unwrap();
    let r = vmd(&["synth", "--feature-dim", "4", "--signal-dims", "6", "--mask-noise-dims", "0", "--out", p(dir.path())]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("error"));
    assert_eq!(code(&vmd(&["synth", "--n", "ten", "--out", p(dir.path())])), 1);
}

#[test]
fn train_eval_resume_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"));
    let config = small_config(dir.path(), 3);
    let run = dir.path().join("run");
    let r = vmd(&["train", "--config", &config, "--data", &data, "--out", p(&run)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    for f in ["train_log.jsonl", "timing.jsonl", "final.ckpt", "split.json", "config.toml", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 3);

    // two more epochs from the checkpoint equal five straight epochs
    let resumed = dir.path().join("resumed");
    let r = vmd(&[
        "train", "--config", &config, "--data", &data, "--out", p(&resumed), "--epochs", "5", "--resume",
        p(&run.join("final.ckpt")),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let straight = dir.path().join("straight");
    assert_eq!(code(&vmd(&["train", "--config", &config, "--data", &data, "--out", p(&straight), "--epochs", "5"])), 0);
    assert_eq!(fs::read(resumed.join("final.ckpt")).unwrap(), fs::read(straight.join("final.ckpt")).unwrap());

    let ckpt = straight.join("final.ckpt");
    let eval = |out: &Path, extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", p(&ckpt), "--data", &data, "--out", p(out)];
        args.extend_from_slice(extra);
        let r = vmd(&args);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        read_json(&out.join("metrics.json"))
    };
    let (a, b) = (eval(&dir.path().join("e1"), &[]), eval(&dir.path().join("e2"), &[]));
    assert_eq!(a, b);
    assert!(a["metrics"]["roc_auc"].is_number());
    assert!(dir.path().join("e1/metrics.txt").exists());
    let teacher = eval(&dir.path().join("e3"), &["--branch", "teacher", "--split", "all"]);
    assert_eq!(teacher["n"], 80);
}

#[test]
fn overfit_model_scores_higher_on_train_than_test() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"));
    let config = dir.path().join("big.toml");
    fs::write(&config, "[train]\nepochs = 150\nbatch_size = 8\nlr = 5e-3\nweight_decay = 0.0\n[model]\nhidden_dims = [32, 32]\nlatent_dim = 8\n").unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&vmd(&["train", "--config", p(&config), "--data", &data, "--out", p(&run)])), 0);
    let acc = |split: &str| {
        let out = dir.path().join(split);
        let r = vmd(&["eval", "--checkpoint", p(&run.join("final.ckpt")), "--data", &data, "--split", split, "--out", p(&out)]);
        assert_eq!(code(&r), 0, "{}", stderr(&r));
        read_json(&out.join("metrics.json"))["metrics"]["accuracy"].as_f64().unwrap()
    };
    assert!(acc("train") > acc("test"));
}

#[test]
fn eval_on_single_class_split_reports_roc_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"));
    let config = small_config(dir.path(), 1);
    let run = dir.path().join("run");
    assert_eq!(code(&vmd(&["train", "--config", &config, "--data", &data, "--out", p(&run)])), 0);
    let labels: Vec<u8> = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["label"].as_u64().unwrap() as u8)
        .collect();
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).take(5).collect();
    let split = dir.path().join("one_class.json");
    fs::write(&split, serde_json::json!({ "train": [], "val": [], "test": positives }).to_string()).unwrap();
    let out = dir.path().join("e");
    let r = vmd(&["eval", "--checkpoint", p(&run.join("final.ckpt")), "--data", &data, "--split-file", p(&split), "--out", p(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(stderr(&r).contains("ROC"), "{}", stderr(&r));
    let m = read_json(&out.join("metrics.json"));
    assert!(m["metrics"]["roc_auc"].is_null());
    assert!(m["roc_error"].is_string());
    assert!(m["metrics"]["accuracy"].is_number());
}

#[test]
fn data_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let r = vmd(&["train", "--data", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("missing.jsonl"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepoch = 3\n").unwrap();
    let data = small_data(&dir.path().join("data"));
    let r = vmd(&["train", "--config", p(&bad), "--data", &data, "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("line 2"), "{}", stderr(&r));
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"));
    let config = small_config(dir.path(), 2);
    let out = dir.path().join("ab");
    let r = vmd(&["ablate", "--config", &config, "--data", &data, "--seeds", "0,1", "--out", p(&out), "--sequential"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let table = read_json(&out.join("ablation.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 4);
    assert_eq!(table["runs"].as_array().unwrap().len(), 8);
    assert!(fs::read_to_string(out.join("ablation.txt")).unwrap().contains("full VMD"));
    assert_eq!(read_json(&out.join("manifest.json"))["seeds"], serde_json::json!([0, 1]));
}

#[test]
fn assert_trends_needs_two_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"));
    let r = vmd(&["ablate", "--data", &data, "--seeds", "3", "--assert-trends", "--out", p(&dir.path().join("ab"))]);
    assert_eq!(code(&r), 1);
    assert!(stderr(&r).contains("two seeds"));
}

#[test]
fn gradcheck_reports_every_op() {
    let r = vmd(&["gradcheck", "--instances", "2"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let report = String::from_utf8(r.stdout).unwrap();
    for op in vmd_core::tensor::DIFFERENTIABLE_OPS.iter().chain(&["objective"]) {
        assert!(report.lines().any(|l| l.split_whitespace().next() == Some(op)), "{op} missing");
    }

    let r = vmd(&["gradcheck", "--op", "softmax"]);
    assert_eq!(code(&r), 0);
    assert_eq!(String::from_utf8(r.stdout).unwrap().lines().count(), 1);
    assert_eq!(code(&vmd(&["gradcheck", "--op", "conv3d"])), 1);
}
