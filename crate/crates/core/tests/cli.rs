use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# four-pixel networks, fast enough for process-level tests
batch_size = 4
latent_dim = 8
embed_dim = 8
channels = 8, 4
max_stage = 1
steps_per_stage = 10
checkpoint_every = 10
";

fn uneq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uneq"))
        .args(args)
        .env_remove("UNEQ_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn train(dir: &Path, out: &str, extra: &str) -> Output {
    let cfg = write_config(dir, extra);
    let out_dir = dir.join(out);
    uneq(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ])
}

#[test]
fn missing_config_names_the_path() {
    let out = uneq(&["train", "--config", "/no/such/dir/run.cfg"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/no/such/dir/run.cfg"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "run", "learning_rate = 0.1\n");
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learning_rate"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn invalid_value_is_rejected_before_work_starts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "run", "batch_size = 1\n");
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("run").exists());
}

#[test]
fn twenty_steps_write_twenty_metrics_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "run", "steps = 20\n");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 20);
    assert!(dir.path().join("run/checkpoints/step_00000010.ckpt").exists());
    assert!(dir.path().join("run/checkpoints/step_00000020.ckpt").exists());
    assert!(dir.path().join("run/previews/step_00000020.ppm").exists());
    assert!(dir.path().join("run/checkpoint.ckpt").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        assert_eq!(code(&train(dir.path(), name, "steps = 12\nseed = 9\n")), 0);
    }
    for file in ["metrics.jsonl", "checkpoint.ckpt", "previews/step_00000010.ppm"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
}

#[test]
fn set_and_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "steps = 50\n");
    let out_dir = dir.path().join("run");
    let out = uneq(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "steps=7",
        "--set",
        "preview=false",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let metrics = fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    assert!(!out_dir.join("previews").exists());

    let flagged = uneq(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--steps",
        "3",
        "--out",
        dir.path().join("flagged").to_str().unwrap(),
    ]);
    assert_eq!(code(&flagged), 0);
    let metrics = fs::read_to_string(dir.path().join("flagged/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn resume_continues_the_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), "full", "steps = 20\n")), 0);
    assert_eq!(code(&train(dir.path(), "part", "steps = 20\n")), 0);
    let part = dir.path().join("part");
    let cfg = write_config(dir.path(), "steps = 20\n");
    let out = uneq(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        part.to_str().unwrap(),
        "--resume",
        part.join("checkpoints/step_00000010.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for file in ["metrics.jsonl", "checkpoint.ckpt"] {
        assert!(
            fs::read(dir.path().join("full").join(file)).unwrap() == fs::read(part.join(file)).unwrap(),
            "{file} differs after resume"
        );
    }
}

#[test]
fn resume_with_a_different_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), "run", "steps = 10\n")), 0);
    let ckpt = dir.path().join("run/checkpoint.ckpt");
    let cfg = write_config(dir.path(), "steps = 20\nseed = 1\n");
    let out = uneq(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("other").to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("different config"));
}

#[test]
fn render_writes_frames_matching_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), "run", "steps = 10\n")), 0);
    let frames = dir.path().join("frames");
    let out = uneq(&[
        "render",
        "--checkpoint",
        dir.path().join("run/checkpoint.ckpt").to_str().unwrap(),
        "--set",
        "render.frames_per_segment=2",
        "--set",
        "render.loop=true",
        "--out",
        frames.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(frames.join("manifest.json")).unwrap()).unwrap();
    let ppm_count = fs::read_dir(&frames)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .count();
    assert_eq!(manifest["frames"], ppm_count as u64);
    assert_eq!(ppm_count, 4 * 2 + 1);
    assert_eq!((manifest["width"].as_u64(), manifest["height"].as_u64()), (Some(16), Some(8)));
    assert_eq!(manifest["plan"]["loop"], true);
    let first = fs::read(frames.join("frame_000000.ppm")).unwrap();
    let last = fs::read(frames.join("frame_000008.ppm")).unwrap();
    assert_eq!(first, last);
}

#[test]
fn truncated_checkpoint_writes_no_frames() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), "run", "steps = 10\n")), 0);
    let bytes = fs::read(dir.path().join("run/checkpoint.ckpt")).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let frames = dir.path().join("frames");
    let out = uneq(&[
        "render",
        "--checkpoint",
        cut.to_str().unwrap(),
        "--out",
        frames.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("truncated"), "{}", stderr(&out));
    assert!(!frames.exists());
}

#[test]
fn bad_checkpoint_version_is_named() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), "run", "steps = 10\n")), 0);
    let mut bytes = fs::read(dir.path().join("run/checkpoint.ckpt")).unwrap();
    bytes[5] = 9;
    let bad = dir.path().join("v9.ckpt");
    fs::write(&bad, bytes).unwrap();
    let out = uneq(&["render", "--checkpoint", bad.to_str().unwrap(), "--out", dir.path().join("f").to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("version 9"), "{}", stderr(&out));
}

#[test]
fn diagnose_zero_lr_run_is_static() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "run", "steps = 30\nlr_g = 0\nlr_d = 0\nmax_stage = 0\n");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = dir.path().join("run.cfg");
    let out = uneq(&[
        "diagnose",
        dir.path().join("run/metrics.jsonl").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("dominant  STATIC"), "{text}");

    let fraction = |label: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(label)).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    let total = fraction("HEALTHY") + fraction("EXPLODING") + fraction("STATIC");
    assert!((total - 1.0).abs() < 1e-3);
}

#[test]
fn diagnose_empty_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = uneq(&["diagnose", empty.to_str().unwrap()]);
    assert_ne!(code(&out), 0);
    assert!(stderr(&out).contains("no metrics records"));
}

#[test]
fn diagnose_malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), "run", "steps = 3\n")), 0);
    let metrics = dir.path().join("run/metrics.jsonl");
    let mut text = fs::read_to_string(&metrics).unwrap();
    text.push_str("{not json\n");
    fs::write(&metrics, text).unwrap();
    let out = uneq(&["diagnose", metrics.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("line 4"), "{}", stderr(&out));
}

#[test]
fn gradcheck_lists_every_op_and_catches_a_corrupted_one() {
    let out = uneq(&["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for op in uneq_core::tensor::OP_NAMES {
        assert!(
            text.lines().any(|l| l.split_whitespace().next() == Some(op)),
            "{op} missing from report"
        );
    }

    let out = uneq(&["gradcheck", "--seeds", "2", "--corrupt", "sigmoid"]);
    assert_eq!(code(&out), 1);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("sigmoid") && l.ends_with("FAIL")), "{text}");
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg");
    let config = uneq_core::cli::RunConfig::from_file(&path).unwrap();
    config.validate().unwrap();
    assert_eq!(config.train.steps, 500);
    assert_eq!(config.out_dir, Path::new("runs/smoke"));
}
