//! Smoke tests for the command-line binary: every subcommand runs end to
//! end, exit codes carry meaning, and fixed seeds reproduce identical
//! output files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drconv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary launches")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_tiny_synth(dir: &Path) -> String {
    let p = dir.join("synth.json");
    fs::write(&p, r#"{"count": 60, "height": 10, "width": 10, "classes": 3}"#).unwrap();
    p.to_string_lossy().into_owned()
}

fn write_tiny_model(dir: &Path) -> String {
    let p = dir.join("model.json");
    fs::write(
        &p,
        r#"{
            "input": {"height": 10, "width": 10, "channels": 1},
            "classes": 3,
            "blocks": [
                {"kind": "standard", "out_channels": 4, "k": 3, "pool_after": true},
                {"kind": "dynamic", "out_channels": 5, "k": 3, "regions": 3}
            ],
            "head_width": 0
        }"#,
    )
    .unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_dynamic_passes_and_exits_zero() {
    let out = run(&["gradcheck", "--height", "5", "--width", "5", "--batch", "1"]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_of(&out);
    assert!(text.contains("all gradient paths verified"), "{text}");
    assert!(text.contains("generator: stage-2 weights"), "dynamic mode lists generator paths: {text}");
}

#[test]
fn gradcheck_fixed_mode_and_geometry_flags_work() {
    let out = run(&[
        "gradcheck", "--mode", "fixed", "--padding", "circular", "--stride", "2", "--k", "1",
        "--height", "6", "--width", "6", "--batch", "1",
    ]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.contains("all gradient paths verified"), "{text}");
    assert!(!text.contains("generator:"), "fixed mode has no generator paths: {text}");
}

#[test]
fn cost_table_lists_the_four_variants() {
    let out = run(&["cost"]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    for needle in ["standard", "local", "fixed", "dynamic"] {
        assert!(text.contains(needle), "missing {needle} row:\n{text}");
    }
}

#[test]
fn unknown_flags_exit_with_usage_error() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2), "clap usage errors exit 2");
}

#[test]
fn invalid_config_exits_with_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("broken.json");
    fs::write(&model, "{not json").unwrap();
    let out = run(&["train", "--model-config", model.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2), "malformed input is a usage-class failure");
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty(), "an explanation lands on stderr");
}

#[test]
fn train_saves_resume_continues_and_visualize_renders() {
    let dir = tempfile::tempdir().unwrap();
    let synth = write_tiny_synth(dir.path());
    let model = write_tiny_model(dir.path());
    let ckpt = dir.path().join("m.ckpt");

    let out = run(&[
        "train", "--synth-config", &synth, "--model-config", &model,
        "--epochs", "2", "--lr", "0.02", "--holdout", "0.25",
        "--save", ckpt.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_of(&out);
    assert!(text.contains("epoch=0") && text.contains("epoch=1"), "{text}");
    assert!(text.contains("test_acc="), "holdout evaluation reported: {text}");
    assert!(ckpt.is_file(), "checkpoint written");

    // Resuming loads the checkpoint (no --model-config needed) and trains on.
    let out2 = run(&[
        "train", "--synth-config", &synth, "--resume", ckpt.to_str().unwrap(),
        "--epochs", "1", "--lr", "0.01", "--holdout", "0.25",
    ]);
    assert!(out2.status.success(), "stderr: {}", String::from_utf8_lossy(&out2.stderr));
    assert!(stdout_of(&out2).contains("epoch=0"));

    // Visualization renders inputs, truth, and the checkpoint's masks.
    let viz = dir.path().join("viz");
    let out3 = run(&[
        "visualize", "--out", viz.to_str().unwrap(), "--synth-config", &synth,
        "--checkpoint", ckpt.to_str().unwrap(), "--count", "2", "--scale", "2",
    ]);
    assert!(out3.status.success(), "stderr: {}", String::from_utf8_lossy(&out3.stderr));
    let names: Vec<String> = fs::read_dir(&viz)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.ends_with("_input.pgm")), "input renderings exist: {names:?}");
    assert!(names.iter().any(|n| n.ends_with("_regions.ppm")), "truth renderings exist: {names:?}");
    assert!(names.iter().any(|n| n.ends_with("_mask.ppm")), "mask renderings exist: {names:?}");
    assert!(stdout_of(&out3).contains("region agreement"), "agreement line printed");
}

#[test]
fn same_seed_renders_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let synth = write_tiny_synth(dir.path());
    let render = |sub: &str| -> Vec<(String, Vec<u8>)> {
        let out_dir = dir.path().join(sub);
        let out = run(&[
            "visualize", "--out", out_dir.to_str().unwrap(), "--synth-config", &synth,
            "--count", "2", "--scale", "1", "--data-seed", "9",
        ]);
        assert!(out.status.success());
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out_dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let a = render("a");
    let b = render("b");
    assert!(!a.is_empty());
    assert_eq!(a, b, "identical seeds must render identical files");
}
