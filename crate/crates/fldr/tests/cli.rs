//! End-to-end runs of the `fldr` binary on tiny synthetic data.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fldr::io::{list_frames, read_image, write_image, BitDepth};
use fldr_core::synthetic::{dead_leaves, Texture};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fldr(args: &[&str]) -> Output {
    fldr_env(args, &[])
}

fn fldr_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fldr"));
    cmd.args(args).env_remove("FLDR_SEED").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `n` frames of a texture translating by `(2, 1)` pixels per frame.
fn write_sequence(dir: &Path, n: usize, size: usize) {
    let tex = Texture::random(&mut ChaCha8Rng::seed_from_u64(3), -40.0, -40.0, size as f64 + 40.0, size as f64 + 40.0);
    for i in 0..n {
        let img = tex.render::<f32>(size, size, 2.0 * i as f64, i as f64);
        write_image(&dir.join(format!("f{i:03}.png")), &img, BitDepth::Eight).unwrap();
    }
}

/// Trains a one-epoch checkpoint on a tiny dataset and returns its path.
fn tiny_checkpoint(root: &Path) -> PathBuf {
    let data = root.join("data");
    let val = root.join("val");
    assert_eq!(code(&fldr(&["make-data", "--out", s(&data), "--count", "4", "--size", "32", "--seed", "1"])), 0);
    assert_eq!(code(&fldr(&["make-data", "--out", s(&val), "--count", "2", "--size", "32", "--seed", "2"])), 0);
    let ckpt = root.join("model.safetensors");
    let out = fldr(&["train", "--data", s(&data), "--val", s(&val), "--out", s(&ckpt), "--epochs", "1", "--batch", "2", "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&fldr(&["--help"])), 0);
    assert_eq!(code(&fldr(&["--version"])), 0);
    assert_eq!(code(&fldr(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&fldr(&[])), 1);
    assert_eq!(code(&fldr(&["interpolate", "--bogus"])), 1);
    assert_eq!(code(&fldr(&["make-data", "--out", "/tmp/x", "--count", "0"])), 1);
    let out = fldr_env(&["make-data", "--out", "/tmp/x", "--count", "1"], &[("FLDR_SEED", "not-a-number")]);
    assert_eq!(code(&out), 1);
}

#[test]
fn bad_config_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "epochs = 1\nno_such_key = 3\n").unwrap();
    let out = fldr(&["--config", s(&cfg), "make-data", "--out", s(&dir.path().join("d")), "--count", "1", "--size", "16"]);
    assert_eq!(code(&out), 1);
    std::fs::write(&cfg, "k = 100\n").unwrap();
    let out = fldr(&["--config", s(&cfg), "train", "--data", "x", "--val", "y", "--out", "z"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let out = fldr(&["train", "--data", s(&missing), "--val", s(&missing), "--out", s(&dir.path().join("m"))]);
    assert_eq!(code(&out), 2);
    let out = fldr(&["interpolate", "--in", s(&missing), "--out", s(&dir.path().join("o")), "--ckpt", s(&missing)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn misaligned_training_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&fldr(&["make-data", "--out", s(&data), "--count", "2", "--size", "24"])), 0);
    let out = fldr(&["train", "--data", s(&data), "--val", s(&data), "--out", s(&dir.path().join("m")), "--epochs", "1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn seed_precedence_flag_then_file_then_env() {
    let dir = tempfile::tempdir().unwrap();
    let index = |name: &str| {
        let d = dir.path().join(name);
        let mut bytes = std::fs::read(d.join("index.json")).unwrap();
        bytes.extend(std::fs::read(d.join("sample_000000").join("it.png")).unwrap());
        bytes
    };
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 7\n").unwrap();
    let run = |name: &str, extra: &[&str], env: &[(&str, &str)]| {
        let out_dir = dir.path().join(name);
        let mut args = vec!["make-data", "--out", s(&out_dir), "--count", "3", "--size", "16"];
        args.extend_from_slice(extra);
        let out = fldr_env(&args, env);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    };
    run("flag7", &["--seed", "7"], &[("FLDR_SEED", "9")]);
    run("file7", &["--config", s(&cfg)], &[("FLDR_SEED", "9")]);
    run("env9", &[], &[("FLDR_SEED", "9")]);
    run("flag9", &["--seed", "9"], &[]);
    run("default0", &[], &[]);
    run("flag0", &["--seed", "0"], &[]);
    assert_eq!(index("flag7"), index("file7"));
    assert_eq!(index("env9"), index("flag9"));
    assert_eq!(index("default0"), index("flag0"));
    assert_ne!(index("flag7"), index("flag9"));
}

#[test]
fn training_is_deterministic_and_pipeline_runs() {
    let root = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(root.path());

    // Same data, same seed: byte-identical checkpoint.
    let again = root.path().join("again.safetensors");
    let out = fldr(&[
        "train",
        "--data",
        s(&root.path().join("data")),
        "--val",
        s(&root.path().join("val")),
        "--out",
        s(&again),
        "--epochs",
        "1",
        "--batch",
        "2",
        "--seed",
        "5",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    // Two frames at factor 8 give the two originals plus seven in between.
    let two = root.path().join("two");
    write_sequence(&two, 2, 32);
    let out8 = root.path().join("out8");
    assert_eq!(code(&fldr(&["interpolate", "--in", s(&two), "--out", s(&out8), "--ckpt", s(&ckpt), "--factor", "8"])), 0);
    let frames = list_frames(&out8).unwrap();
    assert_eq!(frames.len(), 9);
    assert_eq!(read_image(&frames[0]).unwrap().max_abs_diff(&read_image(&two.join("f000.png")).unwrap()), 0.0);

    // Three frames at factor 2, 16-bit output, with diagnostics and two workers.
    let three = root.path().join("three");
    write_sequence(&three, 3, 32);
    let out2 = root.path().join("out2");
    let args = ["interpolate", "--in", s(&three), "--out", s(&out2), "--ckpt", s(&ckpt), "--depth", "16", "--diagnostics", "--jobs", "2"];
    assert_eq!(code(&fldr(&args)), 0);
    assert_eq!(list_frames(&out2).unwrap().len(), 5);
    assert!(out2.join("diagnostics").join("frame_000001_flow01.png").exists());

    // Inference at more levels than training, on non-aligned frames.
    let odd = root.path().join("odd");
    write_sequence(&odd, 2, 40);
    let out_odd = root.path().join("out_odd");
    assert_eq!(code(&fldr(&["interpolate", "--in", s(&odd), "--out", s(&out_odd), "--ckpt", s(&ckpt), "--scales", "2"])), 0);
    assert_eq!(read_image(&list_frames(&out_odd).unwrap()[1]).unwrap().chw(), (3, 40, 40));

    // Evaluation on a 9-frame scene.
    let clip = root.path().join("clip");
    write_sequence(&clip, 9, 32);
    let report = root.path().join("eval").join("report.json");
    assert_eq!(code(&fldr(&["eval", "--ckpt", s(&ckpt), "--in", s(&clip), "--report", s(&report)])), 0);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["clips"].as_array().unwrap().len(), 1);
    assert_eq!(json["clips"][0]["frames"].as_array().unwrap().len(), 7);
    assert!(report.with_extension("txt").exists());

    // Temperature calibration keeps everything but the temperature.
    let cal = root.path().join("cal.safetensors");
    let data = root.path().join("data");
    let val = root.path().join("val");
    let args = ["calibrate", "--ckpt", s(&ckpt), "--data", s(&data), "--val", s(&val), "--out", s(&cal), "--calibration-epochs", "2"];
    assert_eq!(code(&fldr(&args)), 0);
    let before = fldr::checkpoint::load_checkpoint(&ckpt).unwrap().model;
    let after = fldr::checkpoint::load_checkpoint(&cal).unwrap().model;
    assert_eq!(before.flow, after.flow);
    assert_eq!(before.basis.u, after.basis.u);

    // Gradient check of the trained checkpoint reports and succeeds.
    let gc = root.path().join("gc.json");
    assert_eq!(code(&fldr(&["gradcheck", "--ckpt", s(&ckpt), "--per-group", "2", "--report", s(&gc)])), 0);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&gc).unwrap()).unwrap();
    assert_eq!(json["groups"].as_array().unwrap().len(), 4);
}

#[test]
fn pca_study_writes_report_table_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    write_image(&img, &dead_leaves::<f32>(4, 64, 64), BitDepth::Sixteen).unwrap();
    let out = dir.path().join("study");
    assert_eq!(code(&fldr(&["pca-study", "--image", s(&img), "--d", "4,8", "--out", s(&out)])), 0);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("study.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["k"], 16);
    assert!(out.join("study.txt").exists());
    assert_eq!(read_image(&out.join("study.png")).unwrap().chw(), (3, 400, 640));
    // r·d² below one is a usage error.
    assert_eq!(code(&fldr(&["pca-study", "--image", s(&img), "--d", "2", "--r", "0.1", "--out", s(&out)])), 1);
}
