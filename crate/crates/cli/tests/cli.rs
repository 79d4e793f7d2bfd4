use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn castdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_castdet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = castdet(args);
    assert!(out.status.success(), "castdet {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: String,
    external: String,
    train_cfg: String,
}

impl Fixture {
    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_str().unwrap().to_string()
    }
}

/// Tiny data, a one-epoch external teacher and a tiny training config.
fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let gen = write(
        &root,
        "gen.json",
        &json!({
            "scene": { "image_size": 32, "min_object_size": 7.0, "max_object_size": 11.0, "max_objects": 3,
                       "n_labeled": 6, "n_unlabeled": 6, "n_test": 3, "crops_per_class": 6, "crops_heldout_per_class": 2, "crop_size": 12 },
            "embed_dim": 16
        }),
    );
    let pre = write(&root, "pre.json", &json!({ "pretrain": { "epochs": 1, "batch": 8 } }));
    let train_cfg = write(
        &root,
        "train.json",
        &json!({
            "mode": "s+lt+et",
            "detector": { "image_size": 32, "channels": [2, 3, 4, 4], "rpn_channels": 3, "anchor_sizes": [8.0, 14.0],
                          "roi_output": 3, "roi_hidden": 6, "embed_dim": 16, "n_proposals": 20, "min_box_size": 1.0 },
            "burn_in_iters": 2, "total_iters": 3, "n_labeled": 2, "n_unlabeled": 2, "n_queue": 2,
            "eval_every": 2, "log_every": 1, "candidate_log_every": 1, "p0": 0.3,
            "box_selection": { "min_objectness": 0.0, "rjv_thresh": 1e6, "target_thresh": 0.2 }
        }),
    );
    let data = root.join("data").to_str().unwrap().to_string();
    let external = root.join("ext").to_str().unwrap().to_string();
    ok(&["gen-data", "--config", &gen, "--out", &data]);
    ok(&["pretrain-external", "--config", &pre, "--data", &data, "--out", &external]);
    Fixture { _tmp: tmp, root, data, external, train_cfg }
}

fn read(p: &str) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{p}: {e}"))
}

#[test]
fn pipeline_trains_evaluates_and_reports() {
    let f = fixture();
    for a in ["manifest.json", "config.json", "labeled.json", "unlabeled.json", "test.json", "hidden_gt.json", "vocab.json", "embeddings.json"] {
        assert!(Path::new(&f.data).join(a).exists(), "{a}");
    }
    let labeled: Value = serde_json::from_slice(&read(&format!("{}/labeled.json", f.data))).unwrap();
    let novel = [3, 4];
    for r in labeled["records"].as_array().unwrap() {
        for a in r["annotations"].as_array().unwrap() {
            assert!(!novel.contains(&a["category"].as_u64().unwrap()), "novel annotation in labeled manifest");
        }
    }

    let run = f.path("runs/a");
    ok(&["train", "--config", &f.train_cfg, "--data", &f.data, "--external", &f.external, "--seed", "3", "--out", &run]);
    for a in ["manifest.json", "config.json", "metrics.jsonl", "candidates.jsonl", "ckpt/student.json", "ckpt/teacher.json", "ckpt/queue.json"] {
        assert!(Path::new(&run).join(a).exists(), "{a}");
    }
    let manifest: Value = serde_json::from_slice(&read(&format!("{run}/manifest.json"))).unwrap();
    assert_eq!(manifest["stage"], "train");
    assert_eq!(manifest["seeds"]["train"], 3);
    assert_eq!(manifest["config"]["seed"], 3, "flag override echoed into the effective config");
    assert_eq!(manifest["config"]["label_fraction"], 1.0);

    let out = ok(&["eval", "--run", &run]);
    assert!(out.contains("matches the training-time evaluation"), "{out}");
    assert!(out.contains("mAP_novel") && out.contains("HM"));
    ok(&["eval", "--run", &run, "--model", "student"]);
    assert!(Path::new(&run).join("report/eval_student.json").exists());

    let rep = ok(&["report", "--run", &run]);
    assert!(rep.contains("mAP_base") && rep.contains("mAP_novel"), "{rep}");
    for a in ["table.txt", "loss.png", "recall.png", "per_class_ap.png"] {
        assert!(Path::new(&run).join("report").join(a).exists(), "{a}");
    }
}

#[test]
fn seeded_training_is_reproducible() {
    let f = fixture();
    let a = f.path("runs/a");
    let b = f.path("runs/b");
    for r in [&a, &b] {
        ok(&["train", "--config", &f.train_cfg, "--data", &f.data, "--external", &f.external, "--seed", "7", "--out", r]);
    }
    for file in ["metrics.jsonl", "candidates.jsonl", "ckpt/student.json", "ckpt/teacher.json", "ckpt/queue.json"] {
        assert_eq!(read(&format!("{a}/{file}")), read(&format!("{b}/{file}")), "{file}");
    }
}

#[test]
fn existing_run_needs_overwrite() {
    let f = fixture();
    let run = f.path("runs/a");
    let args = ["train", "--config", &f.train_cfg, "--data", &f.data, "--external", &f.external, "--iters", "1", "--out", &run];
    ok(&args);
    let again = castdet(&args);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--overwrite"));
    let mut with = args.to_vec();
    with.push("--overwrite");
    ok(&with);
}

#[test]
fn ablation_grid_runs_each_strategy() {
    let f = fixture();
    let out = f.path("abl");
    let table = ok(&["ablate", "--grid", "box-selection", "--config", &f.train_cfg, "--data", &f.data, "--external", &f.external, "--iters", "1", "--out", &out]);
    for v in ["rpn_score", "box_jitter", "reg_jitter"] {
        assert!(table.contains(v), "{table}");
        assert!(Path::new(&out).join(format!("{v}-seed0/manifest.json")).exists(), "{v}");
    }
    let summary: Value = serde_json::from_slice(&read(&format!("{out}/summary.json"))).unwrap();
    assert_eq!(summary["rows"].as_array().unwrap().len(), 3);
    let rep = ok(&["report", "--run", &out]);
    assert!(rep.contains("reg_jitter"));
}

#[test]
fn invalid_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.json", &json!({ "scene": { "min_objects": 5, "max_objects": 2 } }));
    let out = castdet(&["gen-data", "--config", &bad, "--out", tmp.path().join("d").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("object count"));

    let missing = castdet(&["train", "--data", tmp.path().join("nope").to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("manifest.json"));

    let cfg = write(tmp.path(), "lf.json", &json!({ "label_fraction": 0.0 }));
    let frac = castdet(&["train", "--config", &cfg, "--data", "x", "--out", tmp.path().join("r2").to_str().unwrap()]);
    assert!(!frac.status.success());
    assert!(String::from_utf8_lossy(&frac.stderr).contains("label_fraction"));
}
