use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 3,
  "corpus": {"n_speakers": 3, "n_targets": 1, "utterances_per_speaker": 8,
             "frames_per_utterance": [40, 60], "ppg_dim": 6, "mcc_dim": 5, "seed": 3},
  "embedder": {"n_res_blocks": 2, "channels": 8, "embedding_dim": 6},
  "embedder_training": {"steps": 20, "batch_size": 4, "crop_frames": 32},
  "network": {"hidden": 8, "n_recurrent_layers": 1},
  "average": {"steps": 12, "batch_size": 4},
  "adaptation": {"steps": 6, "batch_size": 4}
}"#;

fn vcc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcc"))
        .args(args)
        .env("VCC_LOG_LEVEL", "warn")
        .output()
        .expect("spawn vcc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "vcc failed: {}\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

/// Value after `label: ` on the line starting with it.
fn field(out: &str, label: &str) -> PathBuf {
    let line = out
        .lines()
        .find(|l| l.starts_with(label))
        .unwrap_or_else(|| panic!("no {label} line in {out}"));
    let rest = line[label.len()..].trim_start_matches(':').trim();
    PathBuf::from(rest.split_whitespace().next().unwrap())
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn dry_run_leaves_output_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let cfg = tiny_config(dir.path());
    let text = ok(vcc(&["ablation", "--config", &cfg, "--out", s(&out), "--dry-run"]));
    assert!(text.contains("dry run"));
    assert!(text.contains("AMA-SE-RC"));
    assert!(!out.exists());
}

#[test]
fn missing_checkpoint_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = dir.path().join("m.json");
    fs::write(&manifest, "{}").unwrap();
    let o = vcc(&["eval", "--config", &cfg, "--corpus", s(&manifest), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("paths.checkpoint"), "{}", stderr(&o));

    let o = vcc(&[
        "eval",
        "--config",
        &cfg,
        "--corpus",
        s(&manifest),
        "--checkpoint",
        "/nonexistent/ckpt.json",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("paths.checkpoint"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"network": {"hiden": 3}}"#).unwrap();
    let o = vcc(&["synth-corpus", "--config", s(&p), "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hiden"));
}

#[test]
fn invalid_values_exit_two() {
    let o = vcc(&["ablation", "--alpha=-1", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha"));
    let o = vcc(&["ablation", "--system", "ama-x", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_vcc"))
        .args(["synth-corpus", "--dry-run"])
        .env("VCC_LOG_LEVEL", "loud")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("VCC_LOG_LEVEL"));
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = dir.path().join("m.json");
    fs::write(&manifest, "not json").unwrap();
    let o = vcc(&["pretrain-embedder", "--config", &cfg, "--corpus", s(&manifest), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn run_directories_are_never_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let a = field(&ok(vcc(&["synth-corpus", "--config", &cfg, "--out", s(&out)])), "run directory");
    let b = field(&ok(vcc(&["synth-corpus", "--config", &cfg, "--out", s(&out)])), "run directory");
    assert_ne!(a, b);
    let files_a = fs::read_to_string(a.join("files.json")).unwrap();
    assert!(files_a.contains("corpus/manifest.json"));
    assert_eq!(
        fs::read(a.join("corpus/manifest.json")).unwrap(),
        fs::read(b.join("corpus/manifest.json")).unwrap()
    );
}

#[test]
fn step_by_step_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let o = ok(vcc(&["synth-corpus", "--config", &cfg, "--out", s(&out)]));
    let corpus = field(&o, "corpus");

    let o = ok(vcc(&["pretrain-embedder", "--config", &cfg, "--out", s(&out), "--corpus", s(&corpus)]));
    let embedder = field(&o, "embedder");

    let common = ["--config", &cfg, "--out", s(&out), "--corpus", s(&corpus), "--system", "ama-se-rc"];
    let mut args = vec!["train-average"];
    args.extend_from_slice(&common);
    args.extend_from_slice(&["--embedder", s(&embedder)]);
    let average = field(&ok(vcc(&args)), "checkpoint");

    // The last speaker is the only adaptation target.
    let mut args = vec!["adapt"];
    args.extend_from_slice(&common);
    args.extend_from_slice(&["--embedder", s(&embedder), "--checkpoint", s(&average), "--target", "spk02"]);
    let adapted = field(&ok(vcc(&args)), "checkpoint");

    let o = vcc(&[
        "convert",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--corpus",
        s(&corpus),
        "--embedder",
        s(&embedder),
        "--checkpoint",
        s(&average),
        "--utterance",
        "spk00_eval_000",
        "--target",
        "spk02",
    ]);
    assert_eq!(o.status.code(), Some(1), "average checkpoints need --allow-average");

    let o = ok(vcc(&[
        "convert",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--corpus",
        s(&corpus),
        "--embedder",
        s(&embedder),
        "--checkpoint",
        s(&adapted),
        "--utterance",
        "spk00_eval_000",
    ]));
    assert!(field(&o, "converted").is_file());

    let o = ok(vcc(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--corpus",
        s(&corpus),
        "--embedder",
        s(&embedder),
        "--checkpoint",
        s(&adapted),
    ]));
    assert!(o.contains("AMA-SE-RC"), "{o}");
    let run = field(&o, "run directory");
    assert!(run.join("reports/report.json").is_file());
    assert!(run.join("reports/per_utterance.csv").is_file());
}

#[test]
fn ablation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("runs");
    let a = field(&ok(vcc(&["ablation", "--config", &cfg, "--out", s(&out), "--seed", "7"])), "run directory");
    let b = field(&ok(vcc(&["ablation", "--config", &cfg, "--out", s(&out), "--seed", "7"])), "run directory");
    for f in ["reports/report.json", "reports/report.txt", "reports/per_utterance.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let files: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("files.json")).unwrap()).unwrap();
    assert!(files.get("checkpoints/ama-se-rc/average.params").is_some());
}
