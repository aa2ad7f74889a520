use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use condsynth_core::training::Checkpoint;
use condsynth_core::wav::read_mono16;

fn condsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condsynth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_dir(out: &Output) -> PathBuf {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout.clone()).unwrap().trim())
}

fn entries(dir: &Path) -> Vec<PathBuf> {
    match std::fs::read_dir(dir) {
        Ok(rd) => rd.map(|e| e.unwrap().path()).collect(),
        Err(_) => Vec::new(),
    }
}

/// Small network and corpus so the pipeline runs in seconds.
const TINY: &str = r#"{
  "corpus": {"semitones": [0], "volumes": [24], "tone_seconds": 0.5},
  "train": {"steps": 3, "batch_size": 4, "chunk_size": 2, "seq_len": 32,
            "dims": {"hidden_size": 8, "num_layers": 1}, "log_every": 1,
            "checkpoint_every": 2},
  "synth": {"schedule": {"kind": "constant", "point": {"pitch": 0.0, "volume": 1.0, "instrument": 0.0}, "duration": 0.25}}
}"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_corpus_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let cfg = write_config(tmp.path(), r#"{"corpus_path": "nowhere/corpus.bin"}"#);
    let res = condsynth(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("missing corpus file"));
    assert!(entries(&out).is_empty());
}

#[test]
fn zero_duration_synth_writes_empty_wav() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap().to_string();
    let dir = run_dir(&condsynth(&["synth", "--duration", "0", "--out", &out]));
    assert!(read_mono16(&dir.join("out.wav")).unwrap().is_empty());
    assert_eq!(std::fs::read(dir.join("codes.bin")).unwrap().len(), 0);
}

#[test]
fn unknown_key_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"foo": 1}"#);
    let res = condsynth(&["gen-corpus", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("foo"));
}

#[test]
fn seed_flag_overrides_file_and_config_is_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"seed": 3, "corpus": {"semitones": [0, 12], "volumes": [24]}}"#);
    let dir = run_dir(&condsynth(&[
        "gen-corpus",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--out",
        tmp.path().join("runs").to_str().unwrap(),
    ]));
    let echo: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 9);
    assert_eq!(echo["corpus"]["seed"], 9);
    assert_eq!(echo["train"]["seed"], 9);
    assert!(dir.join("corpus.bin").is_file());
    assert!(dir.join("log.txt").is_file());
    let cells = std::fs::read_to_string(dir.join("cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 3);
}

#[test]
fn pipeline_gen_train_synth_analyze() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let runs_s = runs.to_str().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let cfg_s = cfg.to_str().unwrap();

    let corpus_dir = run_dir(&condsynth(&["gen-corpus", "--config", cfg_s, "--out", runs_s]));
    let corpus_path = corpus_dir.join("corpus.bin");
    let corpus_bytes = std::fs::read(&corpus_path).unwrap();

    let train_cfg = write_config(
        tmp.path(),
        &TINY.replacen('{', &format!("{{\n  \"corpus_path\": {:?},", corpus_path.to_str().unwrap()), 1),
    );
    let train_dir = run_dir(&condsynth(&["train", "--config", train_cfg.to_str().unwrap(), "--out", runs_s, "--steps", "4"]));
    assert_eq!(std::fs::read(&corpus_path).unwrap(), corpus_bytes, "inputs are not mutated");
    let loss = std::fs::read_to_string(train_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5);
    assert!(train_dir.join("checkpoint-2.ckpt").is_file());
    let ckpt_path = train_dir.join("checkpoint.ckpt");
    assert_eq!(Checkpoint::load(&ckpt_path).unwrap().step, 4);

    let synth_dir = run_dir(&condsynth(&[
        "synth",
        "--config",
        cfg_s,
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--out",
        runs_s,
    ]));
    let wav = synth_dir.join("out.wav");
    assert_eq!(read_mono16(&wav).unwrap().len(), 4_000);
    assert_eq!(std::fs::read(synth_dir.join("codes.bin")).unwrap().len(), 4_000);

    // Same checkpoint and config give the same code stream.
    let again = run_dir(&condsynth(&[
        "synth",
        "--config",
        cfg_s,
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--out",
        runs_s,
    ]));
    assert_eq!(
        std::fs::read(again.join("codes.bin")).unwrap(),
        std::fs::read(synth_dir.join("codes.bin")).unwrap()
    );

    let analyze_dir = run_dir(&condsynth(&["analyze", "--input", wav.to_str().unwrap(), "--out", runs_s]));
    let f0 = std::fs::read_to_string(analyze_dir.join("f0.csv")).unwrap();
    assert!(f0.starts_with("time,f0,confidence\n"));
    assert_eq!(f0.lines().count(), 1 + (4_000 - 1024) / 160 + 1);
    assert!(std::fs::read(analyze_dir.join("spectrogram.pgm")).unwrap().starts_with(b"P5"));
    assert!(analyze_dir.join("spectrogram.csv").is_file());
}

#[test]
fn synth_without_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let res = condsynth(&["synth", "--checkpoint", "missing.ckpt", "--out", runs.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(entries(&runs).is_empty());
    let res = condsynth(&["analyze", "--out", runs.to_str().unwrap()]);
    assert!(!res.status.success());
}

#[test]
fn failing_experiment_lists_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"experiment": {"recipe": {
            "corpus": {"semitones": [0], "volumes": [24], "tone_seconds": 0.5},
            "train": {"steps": 1, "batch_size": 2, "chunk_size": 2, "seq_len": 16,
                      "dims": {"hidden_size": 4, "num_layers": 1}},
            "schedule": {"kind": "constant", "point": {"pitch": 0.0, "volume": 1.0, "instrument": 0.0}, "duration": 0.5}
        }}}"#,
    );
    let runs = tmp.path().join("runs");
    let res = condsynth(&[
        "experiment",
        "single-pitch",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
    ]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("experiment single-pitch failed"), "{err}");
    assert!(err.contains("bound"), "{err}");
    let dirs = entries(&runs);
    assert_eq!(dirs.len(), 1);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dirs[0].join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
    assert!(dirs[0].join("out.wav").is_file());
}

#[test]
fn unknown_experiment_name_is_rejected() {
    let res = condsynth(&["experiment", "fig99"]);
    assert!(!res.status.success());
}
