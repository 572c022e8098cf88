mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{small_config, small_spec};
use mixspeech::losses::LossWeights;
use mixspeech::train::{read_metrics, METRICS_FILE};
use serde_json::Value;
use tempfile::TempDir;

fn mixspeech(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixspeech"))
        .args(args)
        .env("MIXSPEECH_THREADS", "1")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn summary(out: &Output) -> Value {
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(stdout.lines().count(), 1, "stdout: {stdout}");
    serde_json::from_str(stdout.trim()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_path_buf()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Small corpus plus a config that points at it.
fn workspace() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_json(&dir.path().join("spec.json"), &small_spec());
    let corpus = dir.path().join("corpus");
    let out = mixspeech(&["gen-corpus", "--spec", s(&spec), "--out", s(&corpus)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let config = write_json(&dir.path().join("config.json"), &small_config(&corpus));
    (dir, corpus, config)
}

#[test]
fn gen_corpus_is_deterministic_and_counts_match() {
    let (dir, corpus, _) = workspace();
    let again = dir.path().join("again");
    let out = mixspeech(&["gen-corpus", "--spec", s(&dir.path().join("spec.json")), "--out", s(&again)]);
    assert_eq!(code(&out), 0);
    let v = summary(&out);
    assert_eq!((v["train"].as_u64(), v["valid"].as_u64(), v["test"].as_u64()), (Some(24), Some(6), Some(6)));
    assert_eq!(tree(&corpus), tree(&again));
    for (split, n) in [("train", 24), ("valid", 6), ("test", 6)] {
        let text = fs::read_to_string(corpus.join(format!("manifest.{split}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), n);
    }
}

#[test]
fn invalid_spec_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec();
    spec.n_visemes = spec.n_phonemes + 1;
    let path = write_json(&dir.path().join("spec.json"), &spec);
    let out = mixspeech(&["gen-corpus", "--spec", s(&path), "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_visemes < n_phonemes"));
    assert!(out.stdout.is_empty());
}

#[test]
fn occupied_output_needs_force() {
    let (dir, corpus, _) = workspace();
    let spec = dir.path().join("spec.json");
    let out = mixspeech(&["gen-corpus", "--spec", s(&spec), "--out", s(&corpus)]);
    assert_eq!(code(&out), 2);
    let out = mixspeech(&["gen-corpus", "--spec", s(&spec), "--out", s(&corpus), "--force"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let (dir, _, config) = workspace();
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&config).unwrap()).unwrap();
    v["learning_rate"] = 0.1.into();
    let bad = write_json(&dir.path().join("bad.json"), &v);
    let out = mixspeech(&["pretrain", "--config", s(&bad), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn train_and_evaluate_round_trip() {
    let (dir, corpus, config) = workspace();
    let pre = dir.path().join("pre");
    let out = mixspeech(&["pretrain", "--config", s(&config), "--out", s(&pre)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = summary(&out)["checkpoint"].as_str().unwrap().to_string();

    // missing --init
    let out = mixspeech(&["train", "--config", s(&config), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);

    let mut baseline = small_config(&corpus);
    baseline.loss_weights = LossWeights::new(0.0, 0.0).unwrap();
    let baseline = write_json(&dir.path().join("baseline.json"), &baseline);
    let mut logs = Vec::new();
    for run in ["b1", "b2"] {
        let post = dir.path().join(run);
        let out = mixspeech(&["train", "--config", s(&baseline), "--init", &ckpt, "--out", s(&post)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        logs.push(fs::read(post.join(METRICS_FILE)).unwrap());
        let records = read_metrics(&post.join(METRICS_FILE)).unwrap();
        assert!(records.iter().all(|r| r.phi.is_none_or(|p| p == 0.1)));
    }
    assert_eq!(logs[0], logs[1]);

    let manifest = corpus.join("manifest.test.jsonl");
    let eval = |extra: &[&str], name: &str| {
        let report = dir.path().join(name);
        let mut args = vec!["evaluate", "--checkpoint", &ckpt, "--manifest", s(&manifest), "--out", s(&report)];
        args.extend_from_slice(extra);
        let out = mixspeech(&args);
        (out, report)
    };
    let (out, plain) = eval(&["--modality", "visual"], "visual.json");
    assert_eq!(code(&out), 0);
    let v = summary(&out);
    assert!(v["bleu"].is_number() && v["wer"].is_number());
    let (out, clean) = eval(&["--modality", "visual", "--snr", "clean"], "visual-clean.json");
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(&plain).unwrap(), fs::read(&clean).unwrap());
    assert!(dir.path().join("visual.hyp.jsonl").is_file());

    for db in ["-20", "-10", "0", "10", "20"] {
        let (out, report) = eval(&["--modality", "audio", "--snr", db], &format!("audio{db}.json"));
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(report.is_file());
    }

    let (out, _) = eval(&["--modality", "mixed"], "mixed.json");
    assert_eq!(code(&out), 2);
    let (out, _) = eval(&["--modality", "mixed", "--phi", "0.5"], "mixed.json");
    assert_eq!(code(&out), 0);
    let (out, _) = eval(&["--modality", "visual"], "visual.json");
    assert_eq!(code(&out), 2, "existing report without --force");

    let missing = dir.path().join("missing.mxck");
    let out = mixspeech(&[
        "evaluate", "--checkpoint", s(&missing), "--manifest", s(&manifest),
        "--modality", "audio", "--out", s(&dir.path().join("m.json")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(code(&mixspeech(&["--help"])), 0);
    assert_eq!(code(&mixspeech(&["pretrain"])), 2);
    assert_eq!(code(&mixspeech(&["frobnicate"])), 2);
}

#[test]
fn non_finite_loss_aborts_with_code_3() {
    let (dir, corpus, _) = workspace();
    let mut config = small_config(&corpus);
    config.optimizer.lr = 1e300;
    config.stage1_warmup_fraction = 0.0;
    let path = write_json(&dir.path().join("hot.json"), &config);
    let run = dir.path().join("hot");
    let out = mixspeech(&["pretrain", "--config", s(&path), "--out", s(&run)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let records = read_metrics(&run.join(METRICS_FILE)).unwrap();
    let last = records.last().unwrap();
    assert!(!last.total.is_finite());
    assert!(last.diagnostic.is_some());
}

#[test]
fn ablate_writes_twelve_runs() {
    let (dir, corpus, _) = workspace();
    let mut config = small_config(&corpus);
    config.stage1_steps = 8;
    config.stage2_steps = 4;
    config.eval_every = 4;
    let path = write_json(&dir.path().join("abl.json"), &config);
    let out_dir = dir.path().join("abl");
    let out = mixspeech(&["ablate", "--config", s(&path), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(summary(&out)["runs"], 12);
    let result: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    let rows = result["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 12);
    for row in rows {
        assert!(Path::new(row["run_dir"].as_str().unwrap()).join("config.snapshot.json").is_file());
    }
    assert!(fs::read_to_string(out_dir.join("ablation.txt")).unwrap().contains("median"));
}
