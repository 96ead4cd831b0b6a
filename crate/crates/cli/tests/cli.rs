use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn acronym(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acronym"))
        .args(args)
        .env_remove("ACRONYM_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn make_toy(dir: &Path) -> PathBuf {
    ok(acronym(&["make-toy", "--dir", dir.to_str().unwrap()]));
    dir.join("run.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_manifest(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn digest(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

fn rendered_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "svg")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn full_run_is_reproducible_and_manifest_matches_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = make_toy(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(acronym(&["--config", s(&cfg), "--out", s(&a), "all"]));
    ok(acronym(&["--config", s(&cfg), "--out", s(&b), "all"]));

    let first = rendered_files(&a);
    assert!(first.len() > 50, "only {} files", first.len());
    assert_eq!(first, rendered_files(&b));

    let manifest = read_manifest(&a.join("manifest_all.json"));
    assert_eq!(manifest["config"]["seed"], 0);
    let experiments = manifest["experiments"].as_array().unwrap();
    assert!(experiments.iter().any(|e| e["name"] == "ablate"));
    let mut checked = 0;
    for exp in experiments {
        assert!(exp["wall_seconds"].as_f64().unwrap() >= 0.0);
        for out in exp["outputs"].as_array().unwrap() {
            let path = a.join(out["path"].as_str().unwrap());
            assert_eq!(out["sha256"].as_str().unwrap(), digest(&path), "{}", path.display());
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn missing_word_list_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_words.txt");
    let out = acronym(&["--seed", "0", "--word-list", s(&missing), "--out", s(dir.path()), "gen-dataset"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no_such_words.txt"), "{stderr}");
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = acronym(&["--out", s(dir.path()), "gen-dataset"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn model_commands_need_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = acronym(&["--seed", "0", "--dataset-size", "4", "--out", s(dir.path()), "eval-baseline"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights"));
}

#[test]
fn single_sample_dataset_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = make_toy(dir.path());
    let out_dir = dir.path().join("one");
    for cmd in ["gen-dataset", "eval-baseline"] {
        ok(acronym(&["--config", s(&cfg), "--dataset-size", "1", "--out", s(&out_dir), cmd]));
    }
    let lines = std::fs::read_to_string(out_dir.join("dataset.jsonl")).unwrap();
    assert_eq!(lines.lines().filter(|l| !l.trim().is_empty()).count(), 1);
    let manifest = read_manifest(&out_dir.join("manifest_eval-baseline.json"));
    assert_eq!(manifest["config"]["dataset_size"], 1);
    assert_eq!(manifest["experiments"].as_array().unwrap().len(), 1);
}

#[test]
fn bundled_dataset_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(acronym(&["--seed", seed, "--dataset-size", "20", "--out", s(&out), "gen-dataset"]));
        std::fs::read(out.join("dataset.jsonl")).unwrap()
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
}

#[test]
fn patch_rejects_letters_outside_the_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = make_toy(dir.path());
    let out = acronym(&[
        "--config", s(&cfg), "--out", s(&dir.path().join("p")),
        "patch", "--target", "residual", "--corruption", "previous_words", "--letter", "1",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
