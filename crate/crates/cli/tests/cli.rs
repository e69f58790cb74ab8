use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "epochs": 2, "batch_size": 4, "train_size": 8, "val_size": 4,
  "model": {"image_size": 32, "channels": [4, 8, 8, 8], "hidden": 8, "text_dim": 8,
            "text_layers": 1, "text_heads": 2, "text_ff": 16, "pool_heads": 2,
            "num_queries": 3, "decoder_layers": 1, "decoder_heads": 2,
            "decoder_ff": 16, "mqe_heads": 2}
}"#;

fn mmnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmnet")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn training_twice_writes_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = mmnet(&["train", "--config", s(&cfg), "--seed", "7", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ma = fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("steps.jsonl")).unwrap(), fs::read(b.join("steps.jsonl")).unwrap());
    let lines: Vec<Value> = String::from_utf8(ma).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "loss", "iou", "pr50", "pr60", "pr70", "pr80", "pr90", "lr"] {
        assert!(lines[1].get(key).is_some(), "metrics line lacks {key}");
    }
    let m = json(&a.join("train.manifest.json"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["seed"], 7);
    assert_eq!(m["invocation"]["command"], "train");
    assert!(m["started"].is_string() && m["finished"].is_string());
    assert!(Path::new(m["artifacts"]["checkpoint"].as_str().unwrap()).exists());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("run");
    let o = mmnet(&["train", "--config", s(&cfg), "--epochs", "1", "--no-mqe", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 1);
    let m = json(&out.join("train.manifest.json"));
    assert_eq!(m["config"]["epochs"], 1);
    assert_eq!(m["config"]["model"]["use_mqe"], false);
    assert_eq!(m["config"]["model"]["hidden"], 8);
}

#[test]
fn replaying_a_manifest_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&mmnet(&["train", "--config", s(&cfg), "--lr", "0.002", "--out", s(&a)])), 0);
    // The config file is gone; replay must rely on the manifest alone.
    fs::remove_file(&cfg).unwrap();
    let o = mmnet(&["replay", s(&a.join("train.manifest.json")), "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.mmnk")).unwrap(), fs::read(b.join("checkpoint.mmnk")).unwrap());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("x");
    assert_eq!(code(&mmnet(&[])), 1);
    assert_eq!(code(&mmnet(&["train", "--config", s(&cfg)])), 1);
    assert_eq!(code(&mmnet(&["frobnicate"])), 1);
    assert_eq!(code(&mmnet(&["--help"])), 0);

    let typo = dir.path().join("typo.json");
    fs::write(&typo, r#"{"epochz": 3}"#).unwrap();
    assert_eq!(code(&mmnet(&["train", "--config", s(&typo), "--out", s(&out)])), 2);
    assert_eq!(code(&mmnet(&["train", "--config", s(&cfg), "--num-queries", "0", "--out", s(&out)])), 2);
    assert_eq!(code(&mmnet(&["train", "--config", s(&cfg), "--lr", "-1", "--out", s(&out)])), 2);
    assert_eq!(code(&mmnet(&["train", "--config", s(&dir.path().join("missing.json")), "--out", s(&out)])), 2);

    let o = mmnet(&["eval", "--checkpoint", s(&dir.path().join("none.mmnk"))]);
    assert_eq!(code(&o), 3);
    assert!(!o.stderr.is_empty());
    let junk = dir.path().join("junk.mmnk");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&mmnet(&["eval", "--checkpoint", s(&junk)])), 3);
    let m = json(&dir.path().join("eval.manifest.json"));
    assert_eq!(m["status"], "failed");
    assert!(m["error"].as_str().unwrap().contains("magic"));
}

#[test]
fn generated_data_round_trips_through_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let data = dir.path().join("data");
    assert_eq!(code(&mmnet(&["gen-data", "--config", s(&cfg), "--out", s(&data)])), 0);
    for f in ["vocab.txt", "train/samples.jsonl", "val/samples.jsonl", "train/images/train-000000.png", "val/masks/val-000003.png"] {
        assert!(data.join(f).exists(), "missing {f}");
    }
    let line: Value = serde_json::from_str(fs::read_to_string(data.join("val/samples.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    for key in ["id", "tokens", "text", "object"] {
        assert!(line.get(key).is_some(), "sample metadata lacks {key}");
    }
    // Training from disk and from the generator sees the same samples.
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&mmnet(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&a)])), 0);
    assert_eq!(code(&mmnet(&["train", "--config", s(&cfg), "--out", s(&b)])), 0);
    assert_eq!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(b.join("metrics.jsonl")).unwrap());
    // A dataset rendered at another size does not fit the model.
    let o = mmnet(&["train", "--config", s(&cfg), "--image-size", "64", "--data", s(&data), "--out", s(&a)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluation_is_repeatable_and_matches_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&mmnet(&["train", "--config", s(&cfg), "--out", s(&run)])), 0);
    let trained = json(&run.join("eval-val.json"));
    let ck = run.join("checkpoint.mmnk");
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    let o = mmnet(&["eval", "--checkpoint", s(&ck), "--split", "val", "--out", s(&e1)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("IoU"));
    assert_eq!(code(&mmnet(&["eval", "--checkpoint", s(&ck), "--out", s(&e2)])), 0);
    let (r1, r2) = (json(&e1.join("eval-val.json")), json(&e2.join("eval-val.json")));
    assert_eq!(r1, r2);
    assert_eq!(r1, trained);
}

#[test]
fn query_count_ablation_writes_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = dir.path().join("nq");
    let o = mmnet(&["ablate", "--config", s(&cfg), "--epochs", "1", "--study", "nq", "--seeds", "0", "--jobs", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("nq.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let header: Vec<&str> = lines[1].split('|').map(str::trim).collect();
    assert_eq!(header, ["N_q", "IoU", "Pr@50", "Pr@60", "Pr@70", "Pr@80", "Pr@90"]);
    let keys: Vec<&str> = lines[3..].iter().map(|l| l.split('|').next().unwrap().trim()).collect();
    assert_eq!(keys, ["32", "24", "16", "8", "4", "2", "1"]);
    let table = json(&out.join("nq.json"));
    assert_eq!(table["rows"].as_array().unwrap().len(), 7);
    assert_eq!(String::from_utf8_lossy(&o.stdout), text);
    assert!(out.join("ablate.manifest.json").exists());
}

#[test]
fn exported_masks_follow_the_projector_switch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&mmnet(&["train", "--config", s(&cfg), "--epochs", "1", "--out", s(&run)])), 0);
    let ck = run.join("checkpoint.mmnk");
    let (multi, single) = (dir.path().join("multi"), dir.path().join("single"));
    assert_eq!(code(&mmnet(&["export-masks", "--checkpoint", s(&ck), "--count", "2", "--out", s(&multi)])), 0);
    assert_eq!(code(&mmnet(&["export-masks", "--checkpoint", s(&ck), "--count", "2", "--no-mmp", "--out", s(&single)])), 0);
    let a = json(&multi.join("val-000001/sample.json"));
    assert_eq!(a["query_masks"].as_array().unwrap().len(), 3);
    let total: f64 = a["scores"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6);
    for f in ["image.png", "gt.png", "query_02.png", "scores.png", "probability.png", "prediction.png"] {
        assert!(multi.join("val-000001").join(f).exists(), "missing {f}");
    }
    let b = json(&single.join("val-000000/sample.json"));
    assert_eq!(b["use_mmp"], false);
    assert_eq!(b["query_masks"].as_array().unwrap().len(), 1);
    assert!(!single.join("val-000002").exists());
}

#[test]
fn overfit_checkpoint_scores_above_point_nine_on_its_samples() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("overfit");
    let o = mmnet(&[
        "train", "--train-size", "16", "--val-size", "0", "--epochs", "150", "--batch-size", "8", "--lr", "0.001",
        "--num-queries", "8", "--out", s(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval = dir.path().join("eval");
    let o = mmnet(&["eval", "--checkpoint", s(&run.join("checkpoint.mmnk")), "--split", "train", "--out", s(&eval)]);
    assert_eq!(code(&o), 0);
    let iou = json(&eval.join("eval-train.json"))["iou"].as_f64().unwrap();
    assert!(iou > 0.9, "train IoU {iou}");
}
