use std::path::Path;
use std::process::{Command, Output};

fn lava(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lava"))
        .arg("--quiet")
        .args(args)
        .output()
        .expect("spawn lava")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&lava(&["--help"])), 0);
    assert_eq!(code(&lava(&["--version"])), 0);
    let bad = lava(&["train-head", "--level", "xyz"]);
    assert_eq!(code(&bad), 1);
    assert!(!bad.stderr.is_empty());
    assert_eq!(code(&lava(&["frobnicate"])), 1);
}

#[test]
fn io_and_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.wav");
    assert_eq!(code(&lava(&["preprocess", "--input", s(&missing)])), 2);
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"OggS not a wav file at all").unwrap();
    assert_eq!(code(&lava(&["preprocess", "--input", s(&junk)])), 1);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"target_acc": 1.5}"#).unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&lava(&["run-experiment", "--config", s(&cfg), "--out", s(&out)])), 1);
    assert_eq!(code(&lava(&["run-experiment", "--preset", "huge", "--out", s(&out)])), 1);
}

#[test]
fn gradcheck_passes() {
    let o = lava(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() >= 10);
    assert!(lines.iter().all(|l| l["passed"] == true));
}

#[test]
fn stage_by_stage_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let models = dir.path().join("models");
    let o = lava(&[
        "synth-corpus",
        "--out",
        s(&corpus),
        "--per-technology",
        "6,6,6",
        "--real-test",
        "2",
        "--unseen-test",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["train"], 18);
    let manifest = corpus.join("manifest.jsonl");

    let wav = corpus.join("test").join("real_00000.wav");
    let pre = dir.path().join("pre.wav");
    let o = lava(&["preprocess", "--input", s(&wav), "--output", s(&pre)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let j = stdout_json(&o);
    assert_eq!((j["rate"].as_u64(), j["length"].as_u64()), (Some(16_000), Some(48_000)));

    let ae = models.join("autoencoder.lava");
    let o = lava(&[
        "train-ae", "--manifest", s(&manifest), "--out", s(&ae), "--epochs", "1", "--lr", "1e-3", "--batch", "4",
        "--crops", "8", "--val-crops", "4", "--crop-len", "2000",
    ]);
    // Real test clips sit in the manifest but are excluded from training.
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(models.join("autoencoder.history.jsonl").exists());

    for level in ["ada", "admr"] {
        let out = models.join(format!("{level}.lava"));
        let o = lava(&[
            "train-head", "--level", level, "--manifest", s(&manifest), "--encoder", s(&ae), "--out", s(&out),
            "--epochs", "1", "--batch", "4", "--lr", "1e-3", "--window", "1000",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout_json(&o)["attention"], true);
    }
    let o = lava(&[
        "calibrate", "--level", "ada", "--target-acc", "0.5", "--manifest", s(&manifest),
        "--head", s(&models.join("ada.lava")), "--encoder", s(&ae),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["target_acc"], 0.5);
    let o = lava(&[
        "calibrate", "--level", "admr", "--manifest", s(&manifest),
        "--head", s(&models.join("ada.lava")), "--encoder", s(&ae),
    ]);
    assert_eq!(code(&o), 1, "level mismatch is a validation error");

    let o = lava(&["infer", "--audio", s(&wav), "--models", s(&models)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(o.stdout.iter().filter(|&&b| b == b'\n').count(), 1);
    let r = stdout_json(&o);
    assert_eq!(r["admr"].is_null(), !(r["ada"]["accepted"] == true && r["ada"]["label"] == "Codec"));

    for (mode, key) in [("metrics", "ada"), ("error-prop", "ada_error_rate"), ("generalization", "ada_rejection_rate")] {
        let o = lava(&["eval", "--mode", mode, "--manifest", s(&manifest), "--models", s(&models)]);
        assert_eq!(code(&o), 0, "{mode}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!stdout_json(&o)[key].is_null(), "{mode}");
    }
    let unseen = corpus.join("unseen.jsonl");
    let o = lava(&[
        "eval", "--mode", "generalization", "--manifest", s(&unseen), "--models", s(&models), "--expect", "unknown,Codec/*",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout_json(&o)["conformance"].is_number());

    // A head without a threshold cannot drive inference.
    let bare = models.join("bare.lava");
    let mut ck = lava::checkpoint::Checkpoint::load(&models.join("ada.lava")).unwrap();
    ck.meta.remove("tau");
    ck.save(&bare).unwrap();
    let o = lava(&["infer", "--audio", s(&wav), "--models", s(&models), "--ada", s(&bare)]);
    assert_eq!(code(&o), 1);

    let mut bytes = std::fs::read(models.join("ada.lava")).unwrap();
    bytes[4] = b'2';
    let future = models.join("future.lava");
    std::fs::write(&future, bytes).unwrap();
    let o = lava(&["infer", "--audio", s(&wav), "--models", s(&models), "--ada", s(&future)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("LAVA2"));
}
