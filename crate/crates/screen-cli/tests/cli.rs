//! End-to-end tests of the `screen` binary: exit codes, determinism and
//! the artifact contract of each command.

use std::path::Path;
use std::process::{Command, Output};

fn screen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_screen"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small corpus config: enough samples per class to satisfy the split
/// protocol, small images to keep the test fast.
const SMALL_CORPUS: &str = r#"
seed = 7
[corpus.synth]
n_normal = 12
n_tb = 12
image_size = 96
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn synth_reruns_bitwise_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CORPUS);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_ok(&screen(&["synth", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    }
    let manifest_a = std::fs::read(a.join("manifest.csv")).unwrap();
    let manifest_b = std::fs::read(b.join("manifest.csv")).unwrap();
    assert_eq!(manifest_a, manifest_b);
    let img_a = std::fs::read(a.join("images/t00003.png")).unwrap();
    let img_b = std::fs::read(b.join("images/t00003.png")).unwrap();
    assert_eq!(img_a, img_b);
}

#[test]
fn synth_creates_a_missing_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CORPUS);
    let out = dir.path().join("deep/nested/corpus");
    assert_ok(&screen(&["synth", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert!(out.join("manifest.csv").is_file());
}

#[test]
fn invalid_lesion_range_exits_1_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
[corpus.synth]
lesion_radius_range = [5.0, 2.0]
"#,
    );
    let out_dir = dir.path().join("out");
    let out = screen(&["synth", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("lesion_radius_range"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "sede = 7\n");
    let out_dir = dir.path().join("out");
    let out = screen(&["synth", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("sede"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_manifest_exits_1_and_bad_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");

    let out = screen(&[
        "train",
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));

    // a data dir with a manifest but a garbage checkpoint: runtime failure
    let config = write_config(dir.path(), SMALL_CORPUS);
    let corpus = dir.path().join("corpus");
    assert_ok(&screen(&["synth", "--config", config.to_str().unwrap(), "--out", corpus.to_str().unwrap()]));
    let fake = dir.path().join("fake.ckpt");
    std::fs::write(&fake, b"not a checkpoint").unwrap();
    let out = screen(&[
        "eval",
        "--data",
        corpus.to_str().unwrap(),
        "--checkpoint",
        fake.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

/// One flow through the whole surface: synth -> preprocess -> warmup-only
/// train -> eval -> explain, then an explain rerun for determinism.
#[test]
fn pipeline_smoke_run_with_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
seed = 7
[corpus.synth]
n_normal = 12
n_tb = 12
image_size = 96

[model.encoder]
patch_size = 16
embed_dim = 16
depth = 1
heads = 2
input_side = 224

[model.heads]
dino_out_dim = 8
dino_hidden_dim = 12
bottleneck_dim = 6
cls_hidden_dim = 8

[train]
warmup_epochs = 1
batch_size = 4
"#,
    );
    let cfg = config.to_str().unwrap();
    let raw = dir.path().join("raw");
    let prep = dir.path().join("prep");
    let run = dir.path().join("run");

    assert_ok(&screen(&["synth", "--config", cfg, "--out", raw.to_str().unwrap()]));
    assert_ok(&screen(&[
        "preprocess", "--config", cfg,
        "--in", raw.to_str().unwrap(),
        "--out", prep.to_str().unwrap(),
    ]));
    assert!(prep.join("rejections.csv").is_file());

    // warmup-only baseline: exactly one checkpoint
    assert_ok(&screen(&[
        "train", "--config", cfg, "--stages", "0",
        "--data", prep.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]));
    let ckpt = run.join("warmup.ckpt");
    assert!(ckpt.is_file());
    assert!(!run.join("student_stage1.ckpt").exists());

    let report = run.join("report.csv");
    assert_ok(&screen(&[
        "eval", "--config", cfg,
        "--data", prep.to_str().unwrap(),
        "--checkpoint", ckpt.to_str().unwrap(),
        "--out", report.to_str().unwrap(),
    ]));

    // confusion counts must sum to the test-split size (10% per class)
    let text = std::fs::read_to_string(&report).unwrap();
    let count = |name: &str| -> usize {
        text.lines()
            .find(|l| l.starts_with(&format!("{name},")))
            .unwrap_or_else(|| panic!("{name} missing from {text}"))
            .split(',')
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(count("tp") + count("fn") + count("fp") + count("tn"), 2);

    let explain_a = run.join("explain_a");
    let explain_b = run.join("explain_b");
    for out in [&explain_a, &explain_b] {
        assert_ok(&screen(&[
            "explain", "--config", cfg,
            "--data", prep.to_str().unwrap(),
            "--checkpoint", ckpt.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ]));
    }

    // summary has one row per head with the argmax marked
    let summary = std::fs::read_to_string(explain_a.join("head_summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2); // two heads in this tiny encoder
    assert_eq!(rows.iter().filter(|r| r.ends_with(",1")).count(), 1);

    // overlays exist for every tb test sample and reruns are bit-identical
    let pngs: Vec<_> = std::fs::read_dir(&explain_a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png"))
        .collect();
    assert!(!pngs.is_empty());
    for name in &pngs {
        let a = std::fs::read(explain_a.join(name)).unwrap();
        let b = std::fs::read(explain_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
    assert_eq!(
        std::fs::read(explain_a.join("head_summary.csv")).unwrap(),
        std::fs::read(explain_b.join("head_summary.csv")).unwrap()
    );
}
