use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "data": { "seed": 2, "augmentation": 2, "sudoku4": { "count": 40, "val": 8, "golden": 4 } },
  "model": { "hidden": 16, "n_latent": 1, "t_recursions": 1, "n_sup": 2, "q_head": "attention-pooled" },
  "train": { "batch_size": 8, "chunk_size": 4, "epochs": 1, "warmup_steps": 2 },
  "eval": { "k": 3, "sigma": 0.2 },
  "sweep": { "sigmas": [0.1, 0.5], "seeds": [0], "k": 3, "limit": 4 },
  "trace": { "k": 2, "sigma": 0.3 }
}"#;

fn ptrm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptrm"))
        .args(args)
        .arg("--config")
        .arg(dir.join("tiny.json"))
        .env("PTRM_OUT_DIR", dir.join("out"))
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn ok(o: &Output) {
    assert_eq!(
        o.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn every_verb_runs_and_writes_its_outputs() {
    let dir = setup();
    let out = dir.path().join("out");
    ok(&ptrm(dir.path(), &["gen-data"]));
    assert!(out.join("data/manifest.json").exists());
    ok(&ptrm(dir.path(), &["train"]));
    for f in [
        "metrics.jsonl",
        "checkpoint/manifest.json",
        "checkpoint/params.bin",
        "train.meta.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(fs::read_dir(out.join("checkpoints")).unwrap().count() >= 1);

    ok(&ptrm(dir.path(), &["eval", "--workers", "2"]));
    let report = json(&out.join("report.json"));
    assert_eq!(report["count"], 8);
    let exact = &report["exact"];
    assert!(exact["oracle"].as_f64().unwrap() >= exact["best_q"].as_f64().unwrap());
    assert!(exact["oracle"].as_f64().unwrap() >= exact["mode"].as_f64().unwrap());
    assert_eq!(report["by_type"]["sudoku4"]["count"], 8);
    let meta = json(&out.join("report_meta.json"));
    assert!(meta["elapsed_secs"].is_number() && meta["cost_per_attempt"].is_number());
    assert!(meta["build"]
        .as_str()
        .unwrap()
        .starts_with(env!("CARGO_PKG_VERSION")));

    ok(&ptrm(dir.path(), &["sweep"]));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(fs::read_to_string(out.join("sweep.svg"))
        .unwrap()
        .starts_with("<svg"));

    ok(&ptrm(dir.path(), &["trace", "--set", "trace.index=1"]));
    let lines = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    // k rollouts at each of n_sup steps.
    let records: Vec<Value> = lines
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 2 * 2);
    let z = ptrm_core::harness::decode_snapshot(records[0]["z"].as_str().unwrap()).unwrap();
    assert_eq!(z.len(), 16 * 16);
    assert!(records.iter().all(|r| r["cell_accuracy"].is_number()));
    let pca = fs::read_to_string(out.join("trace_pca.csv")).unwrap();
    assert_eq!(pca.lines().count(), 1 + 2 * 2);
    // Scatter colouring follows the final flags in the JSONL.
    let svg = fs::read_to_string(out.join("trace.svg")).unwrap();
    let finals: Vec<bool> = records
        .iter()
        .map(|r| r["final_correct"].as_bool().unwrap())
        .collect();
    let wrong = finals.iter().filter(|&&c| !c).count();
    for (line, rec) in pca.lines().skip(1).zip(&records) {
        assert!(line.ends_with(&rec["final_correct"].to_string()));
    }
    // First series (blue) is "final correct", second (red) is "final wrong".
    assert_eq!(
        svg.matches(r##"fill="#1f77b4" fill-opacity"##).count(),
        finals.len() - wrong
    );
    assert_eq!(
        svg.matches(r##"fill="#d62728" fill-opacity"##).count(),
        wrong
    );
    let curves = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(curves.starts_with("step,group,mean_q,mean_cellacc\n"));

    ok(&ptrm(dir.path(), &["report"]));
    let md = fs::read_to_string(out.join("summary.md")).unwrap();
    assert!(md.contains("All configured checks passed"));
    assert!(out.join("training.svg").exists());
}

#[test]
fn failed_checks_exit_with_three() {
    let dir = setup();
    ok(&ptrm(dir.path(), &["train", "--set", "train.max_steps=2"]));
    ok(&ptrm(dir.path(), &["eval"]));
    let o = ptrm(
        dir.path(),
        &["report", "--set", "checks.min_val_exact=1.01"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(fs::read_to_string(dir.path().join("out/summary.md"))
        .unwrap()
        .contains("Failed checks"));
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = setup();
    assert_eq!(
        ptrm(dir.path(), &["train", "--set", "train.no_such_key=3"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        ptrm(dir.path(), &["train", "--set", "train.lr=-1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(ptrm(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let missing = dir.path().join("nowhere");
    let o = ptrm(
        dir.path(),
        &["eval", "--checkpoint", missing.to_str().unwrap()],
    );
    assert_ne!(o.status.code(), Some(0));
    let help = Command::new(env!("CARGO_BIN_EXE_ptrm"))
        .arg("--help")
        .output()
        .unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn checkpoint_must_match_the_dataset() {
    let dir = setup();
    ok(&ptrm(dir.path(), &["train", "--set", "train.max_steps=1"]));
    let o = ptrm(
        dir.path(),
        &[
            "eval",
            "--set",
            "data.sudoku4.count=0",
            "--set",
            "data.maze.count=12",
            "--set",
            "data.maze.val=4",
            "--set",
            &format!("data_dir={}", dir.path().join("maze").display()),
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn corrupt_checkpoint_is_a_config_error() {
    let dir = setup();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ckpt_truncated");
    let o = ptrm(
        dir.path(),
        &["eval", "--checkpoint", fixture.to_str().unwrap()],
    );
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn resume_appends_to_the_log() {
    let dir = setup();
    let out = dir.path().join("out");
    ok(&ptrm(dir.path(), &["train", "--set", "train.epochs=1"]));
    let before = fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .count();
    let ckpt = out.join("checkpoint");
    let o = ptrm(
        dir.path(),
        &[
            "train",
            "--set",
            "train.epochs=2",
            "--set",
            &format!("resume={}", ckpt.display()),
            "--checkpoint",
            out.join("second").to_str().unwrap(),
        ],
    );
    ok(&o);
    let after = fs::read_to_string(out.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert!(after > before);
}
