use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn selg(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_selg"));
    cmd.args(args).env_remove("SELG_CACHE").env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

const CORPUS: &str = r#"{ "counts": { "train": 4, "val": 2, "test": 3 }, "duration": [0.4, 0.6], "seed": 5 }"#;

fn synth(dir: &Path, name: &str, seed: Option<&str>) -> Output {
    let cfg = dir.join("corpus.json");
    write(&cfg, CORPUS);
    let out = dir.join(name);
    let mut args = vec!["synth-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    if let Some(s) = seed {
        args.extend(["--seed", s]);
    }
    selg(&args, &[])
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&selg(&[], &[])), 2);
    assert_eq!(code(&selg(&["no-such-command"], &[])), 2);
    assert_eq!(code(&selg(&["train"], &[])), 2);
    assert_eq!(code(&selg(&["synth-data"], &[])), 2, "no --out and no cache dir");
    assert_eq!(code(&selg(&["inspect", "test-000000"], &[])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    write(&bad, r#"{ "counts": { "train": 1, "val": 1, "test": 1 }, "colour": "blue" }"#);
    let out = dir.path().join("out");
    assert_eq!(code(&selg(&["synth-data", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()], &[])), 2);
    write(&bad, r#"{ "num_speakers": 7 }"#);
    assert_eq!(code(&selg(&["synth-data", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()], &[])), 2);
    assert_eq!(code(&selg(&["--jobs", "0", "synth-data"], &[])), 2);
}

#[test]
fn synth_data_is_reproducible_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", Some("11"));
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert!(String::from_utf8_lossy(&a.stdout).contains("train 4 / val 2 / test 3"));
    assert_eq!(code(&synth(dir.path(), "b", Some("11"))), 0);
    assert_eq!(code(&synth(dir.path(), "c", Some("12"))), 0);
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "manifest.jsonl"), read("b", "manifest.jsonl"));
    assert_eq!(read("a", "test/test-000000/mixture.wav"), read("b", "test/test-000000/mixture.wav"));
    assert_ne!(read("a", "test/test-000000/mixture.wav"), read("c", "test/test-000000/mixture.wav"));
}

#[test]
fn cache_directory_is_the_default_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("corpus.json");
    write(&cfg, CORPUS);
    let out = selg(&["synth-data", "--config", cfg.to_str().unwrap()], &[("SELG_CACHE", dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("corpus").join("manifest.jsonl").exists());
}

#[test]
fn train_evaluate_report_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(code(&synth(root, "corpus", None)), 0);
    let path = |p: &str| root.join(p).to_str().unwrap().to_string();

    write(
        &root.join("train.json"),
        r#"{ "corpus": "corpus", "variant": { "cues": "lip", "fusion": "concatenation" },
             "train": { "effective_batch": 2, "physical_batch": 2, "crop_secs": 0.2, "max_steps": 2 } }"#,
    );
    let out = selg(&["train", "--config", &path("train.json"), "--out", &path("run"), "--deterministic"], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("run/best.ckpt").exists());
    assert_eq!(fs::read_to_string(root.join("run/steps.jsonl")).unwrap().lines().count(), 2);

    write(&root.join("eval_none.json"), r#"{ "corpus": "corpus" }"#);
    let out = selg(&["evaluate", "--config", &path("eval_none.json"), "--out", &path("eval")], &[]);
    assert_eq!(code(&out), 2);

    write(&root.join("eval.json"), r#"{ "corpus": "corpus", "checkpoint": "run/best.ckpt" }"#);
    let out = selg(&["evaluate", "--config", &path("eval.json"), "--out", &path("eval")], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "records.csv", "histogram.csv", "histogram.svg"] {
        assert!(root.join("eval").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(root.join("eval/records.csv")).unwrap().lines().count(), 4);

    write(&root.join("wrong.json"), r#"{ "corpus": "corpus", "checkpoint": "run/best.ckpt", "variant": { "cues": "both", "fusion": "attention" } }"#);
    assert_eq!(code(&selg(&["evaluate", "--config", &path("wrong.json"), "--out", &path("eval2")], &[])), 2);

    write(&root.join("report.json"), r#"{ "runs": [ { "name": "lip baseline", "report": "eval" } ] }"#);
    let out = selg(&["report", "--config", &path("report.json"), "--out", &path("table")], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(root.join("table/table.md")).unwrap();
    assert!(table.contains("lip baseline"));
    assert!(root.join("table/lip_baseline_histogram.svg").exists());

    let out = selg(&["inspect", "test-000001", "--corpus", &path("corpus")], &[]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("id          test-000001"));
    assert!(text.contains("interferer0"));
    assert_eq!(code(&selg(&["inspect", "test-999999", "--corpus", &path("corpus")], &[])), 2);
}

#[test]
fn missing_corpus_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = selg(&["inspect", "test-000000", "--corpus", dir.path().join("absent").to_str().unwrap()], &[]);
    assert_eq!(code(&out), 1);
}
