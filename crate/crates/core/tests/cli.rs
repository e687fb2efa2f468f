use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;
use xmeta::cli::{ExperimentConfig, OUTPUT_DIR_ENV};
use xmeta::model::{load_checkpoint, Model};
use xmeta::numerics::Rng;

fn xmeta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmeta"))
        .args(args)
        .env_remove(OUTPUT_DIR_ENV)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small ProtoNet experiment on three synthetic languages.
fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut c = json!({
        "seed": 5,
        "data": {
            "source": {"synthetic": {"num_languages": 3, "samples_per_label": 100}},
            "target_language": "l2",
            "target_train_per_label": 8
        },
        "encoder": {"dropout_rate": 0.0},
        "train": {"learner": {"kind": "protonet", "optimizer": {"lr": 1e-3}}, "iterations": 100, "eval_interval": 50},
        "finetune": {"steps": 20, "eval_interval": 10, "batch": {"batch_size": 16, "optimizer": {"lr": 1e-3}}}
    });
    merge(&mut c, extra);
    let path = dir.join("config.in.json");
    fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_data_writes_one_file_per_language_reproducibly() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"num_languages": 2, "samples_per_label": 10}"#).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&xmeta(&["--output-dir", s(&a), "gen-data", "--spec", s(&spec)]));
    ok(&xmeta(&["--output-dir", s(&b), "gen-data", "--spec", s(&spec)]));
    let names: Vec<String> = files(&a).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["l0.jsonl", "l1.jsonl", "labels.txt", "spec.json"]);
    assert_eq!(files(&a), files(&b));
    assert_eq!(fs::read_to_string(a.join("labels.txt")).unwrap(), "c0\nc1\nc2\n");
}

#[test]
fn invalid_spec_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"num_languages": 2, "num_langs": 3}"#).unwrap();
    let out = xmeta(&["--output-dir", s(&tmp.path().join("o")), "gen-data", "--spec", s(&spec)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field `num_langs`"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), json!({"train": {"iteratons": 3}}));
    let out = xmeta(&["--output-dir", s(&tmp.path().join("o")), "train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("o").join("model.ckpt").exists());
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    let out = xmeta(&["--output-dir", s(&tmp.path().join("o")), "eval", "--config", s(&cfg), "--checkpoint", "nope.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn zero_iterations_checkpoint_equals_initialization() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), json!({"train": {"iterations": 0}}));
    let run = tmp.path().join("run");
    ok(&xmeta(&["--output-dir", s(&run), "train", "--config", s(&cfg)]));
    let saved = load_checkpoint(&run.join("model.ckpt")).unwrap();
    let config = ExperimentConfig::load(&cfg).unwrap();
    let mut init = Model::new(config.encoder.clone()).unwrap();
    // One head, registered from the first head stream.
    init.register_head("nli", 3, &mut Rng::new(config.seed).fork(1)).unwrap();
    assert_eq!(saved.flatten(), init.flatten());
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap(), "iteration,epoch,loss,accuracy\n");
}

#[test]
fn reptile_defaults_complete_with_one_row_per_interval() {
    let tmp = TempDir::new().unwrap();
    // Default learner and hyperparameters; only the run length is shortened.
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"data": {"source": {"synthetic": {"samples_per_label": 100}}}, "train": {"iterations": 2000}}"#)
        .unwrap();
    let run = tmp.path().join("run");
    ok(&xmeta(&["--output-dir", s(&run), "train", "--config", s(&cfg)]));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2000 / 500);
    assert!(rows[3].starts_with("2000,1,"));
    let resolved = ExperimentConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(resolved.train.learner.name(), "reptile");
}

#[test]
fn output_dir_env_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let env_dir = tmp.path().join("from-env");
    let cfg = small_config(tmp.path(), json!({"output_dir": s(&tmp.path().join("from-config")), "train": {"iterations": 0}}));
    let out = Command::new(env!("CARGO_BIN_EXE_xmeta"))
        .args(["train", "--config", s(&cfg)])
        .env(OUTPUT_DIR_ENV, &env_dir)
        .output()
        .unwrap();
    ok(&out);
    assert!(env_dir.join("model.ckpt").exists());
    assert!(!tmp.path().join("from-config").exists());
}

#[test]
fn divergence_exits_4_and_leaves_no_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(
        tmp.path(),
        json!({
            "train": {"learner": {"kind": "non_episodic", "optimizer": {"lr": 1e308}}, "iterations": 5},
            "evaluation": {"cells": ["zero_shot", "non_episodic"]}
        }),
    );
    let run = tmp.path().join("run");
    let out = xmeta(&["--output-dir", s(&run), "train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(files(&run).is_empty(), "{:?}", files(&run).iter().map(|f| &f.0).collect::<Vec<_>>());
}

#[test]
fn train_finetune_eval_and_rerun_from_resolved_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), json!({}));
    let run = tmp.path().join("run");
    ok(&xmeta(&["--output-dir", s(&run), "train", "--config", s(&cfg)]));
    let ckpt = run.join("model.ckpt");

    let ft = tmp.path().join("ft");
    ok(&xmeta(&["--output-dir", s(&ft), "finetune", "--config", s(&cfg), "--checkpoint", s(&ckpt)]));
    assert!(ft.join("finetuned.ckpt").exists());

    let ev = tmp.path().join("ev");
    ok(&xmeta(&["--output-dir", s(&ev), "eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]));
    let summary: Value = serde_json::from_str(&fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    for cell in ["zero_shot", "non_episodic", "episodic"] {
        let acc = summary["cells"][cell]["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let confusion: Vec<Vec<u64>> = serde_json::from_value(summary["cells"][cell]["confusion"].clone()).unwrap();
        assert_eq!(confusion.iter().flatten().sum::<u64>(), 60);
        assert!(ev.join(format!("confusion_{cell}.csv")).exists());
    }
    // The `finetune` command and the grid's fine-tuned cell agree.
    assert!(ev.join("finetune_non_episodic.csv").exists());
    assert_eq!(
        fs::read(ft.join("finetune_metrics.csv")).unwrap(),
        fs::read(ev.join("finetune_non_episodic.csv")).unwrap()
    );

    // Re-running training from the run directory's own config reproduces it.
    let again = tmp.path().join("again");
    ok(&xmeta(&["--output-dir", s(&again), "train", "--config", s(&run.join("config.json"))]));
    assert_eq!(files(&run), files(&again));
}

#[test]
fn eval_with_empty_plan_writes_empty_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), json!({"train": {"iterations": 0}, "evaluation": {"cells": []}}));
    let run = tmp.path().join("run");
    ok(&xmeta(&["--output-dir", s(&run), "train", "--config", s(&cfg)]));
    let ev = tmp.path().join("ev");
    let out = xmeta(&["--output-dir", s(&ev), "eval", "--config", s(&cfg), "--checkpoint", s(&run.join("model.ckpt"))]);
    assert_eq!(out.status.code(), Some(0));
    let summary: Value = serde_json::from_str(&fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["cells"], json!({}));
}

#[test]
fn analyze_identical_checkpoints_gives_unit_cca() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), json!({"train": {"iterations": 20, "eval_interval": 10}}));
    let run = tmp.path().join("run");
    ok(&xmeta(&["--output-dir", s(&run), "train", "--config", s(&cfg)]));
    let ckpt = run.join("model.ckpt");
    let an = tmp.path().join("an");
    ok(&xmeta(&["--output-dir", s(&an), "analyze", "--config", s(&cfg), "--before", s(&ckpt), "--after", s(&ckpt)]));
    let cca = fs::read_to_string(an.join("cca.csv")).unwrap();
    let mut lines = cca.lines();
    assert_eq!(lines.next(), Some("layer,similarity"));
    let sims: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(sims.len(), 4);
    assert!(sims.iter().all(|v| (v - 1.0).abs() < 1e-9), "{sims:?}");

    let pca = fs::read_to_string(an.join("pca.csv")).unwrap();
    assert!(pca.starts_with("id,language,x,y\n"));
    assert_eq!(pca.lines().count(), 1 + 3 * 3 * 20);
    let hd = fs::read_to_string(an.join("hausdorff.csv")).unwrap();
    assert!(hd.starts_with("pair,distance\nbefore:l0~l2,"));
    // Same checkpoint on both sides: before and after rows agree.
    let vals: Vec<&str> = hd.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(vals[..3], vals[3..]);
}

#[test]
fn dreca_command_writes_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path(), json!({"dreca": {"embed": "identity"}}));
    let dr = tmp.path().join("dr");
    ok(&xmeta(&["--output-dir", s(&dr), "dreca", "--config", s(&cfg)]));
    let tasks = xmeta::dreca::read_manifest(&dr.join("dreca_tasks.json")).unwrap();
    // Two auxiliary languages, 2^3 tasks each.
    assert_eq!(tasks.len(), 16);

    // Training can consume the manifest.
    let cfg = small_config(tmp.path(), json!({"dreca": {"enabled": true, "embed": "identity"}, "train": {"iterations": 10, "eval_interval": 5}}));
    let run = tmp.path().join("run");
    ok(&xmeta(&[
        "--output-dir",
        s(&run),
        "train",
        "--config",
        s(&cfg),
        "--dreca-manifest",
        s(&dr.join("dreca_tasks.json")),
    ]));
    assert_eq!(fs::read(run.join("dreca_tasks.json")).unwrap(), fs::read(dr.join("dreca_tasks.json")).unwrap());
}
