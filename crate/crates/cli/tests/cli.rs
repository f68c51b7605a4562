//! End-to-end runs of the `gaaf` binary on a miniature synthetic dataset.

use std::path::Path;
use std::process::{Command, Output};

fn gaaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaaf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Config small enough that training runs in seconds.
fn write_tiny_config(path: &Path) {
    let config = r#"{
        "target_dims": [8, 16, 16],
        "levels": 2,
        "base_channels": 2,
        "epochs": 2,
        "batch_size": 2,
        "folds": 2,
        "shift_max_vox": 1,
        "sigma_vox": 1.5,
        "seed": 9,
        "phantom_count": 6,
        "phantom_dims": [16, 32, 32],
        "phantom_semi_axes": [2.0, 3.0],
        "phantom_margin_vox": 3.0
    }"#;
    std::fs::write(path, config).unwrap();
}

#[test]
fn help_exits_zero_with_usage() {
    let out = gaaf(&["infer", "--help"]);
    assert_exit(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--model"), "{text}");
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_exit(&gaaf(&["frobnicate"]), 1);
    assert_exit(&gaaf(&["train", "--no-such-flag"]), 1);
}

#[test]
fn missing_input_directory_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gaaf(&[
        "preprocess",
        "--raw",
        "/no/such/raw_dir",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/raw_dir"), "{err}");
}

#[test]
fn bad_config_key_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let out = gaaf(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_exit(&out, 2);
}

#[test]
fn eval_on_missing_csv_is_a_data_error() {
    assert_exit(&gaaf(&["eval", "--results", "/no/such.csv"]), 2);
}

#[test]
fn full_pipeline_runs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let cfg_s = cfg.to_str().unwrap();
    let path = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    // synth -> preprocess -> train -> test -> infer -> eval
    assert_exit(&gaaf(&["synth", "--config", cfg_s, "--out", &path("raw")]), 0);
    assert_exit(
        &gaaf(&["preprocess", "--config", cfg_s, "--raw", &path("raw"), "--out", &path("data")]),
        0,
    );
    assert_exit(
        &gaaf(&["train", "--config", cfg_s, "--data", &path("data"), "--out", &path("models")]),
        0,
    );
    for f in ["fold0.gckp", "fold1.gckp", "split.json", "history.json"] {
        assert!(dir.path().join("models").join(f).exists(), "missing {f}");
    }
    assert_exit(
        &gaaf(&[
            "test",
            "--config",
            cfg_s,
            "--data",
            &path("data"),
            "--models",
            &path("models"),
            "--out",
            &path("results"),
        ]),
        0,
    );
    assert!(dir.path().join("results/results.csv").exists());
    assert!(dir.path().join("results/report.json").exists());

    // Inference over the raw directory scores against the gold masks and
    // honours --crop.
    assert_exit(
        &gaaf(&[
            "infer",
            "--config",
            cfg_s,
            "--crop",
            "8x8x8",
            "--input",
            &path("raw"),
            "--model",
            &path("models/fold0.gckp"),
            "--out",
            &path("located"),
        ]),
        0,
    );
    assert!(dir.path().join("located/results.csv").exists());
    assert!(dir.path().join("located/phantom000_crop.gvol").exists());
    let sidecar = std::fs::read_to_string(dir.path().join("located/phantom000_crop.json")).unwrap();
    assert!(sidecar.contains("center_full"), "{sidecar}");

    assert_exit(
        &gaaf(&["eval", "--results", &path("results/results.csv"), "--out", &path("evaldir")]),
        0,
    );
    let summary = std::fs::read_to_string(dir.path().join("evaldir/summary.json")).unwrap();
    assert!(summary.contains("median_mm"), "{summary}");

    // Re-running the whole pipeline into fresh directories reproduces
    // every artifact byte for byte.
    assert_exit(&gaaf(&["synth", "--config", cfg_s, "--out", &path("raw2")]), 0);
    assert_exit(
        &gaaf(&["preprocess", "--config", cfg_s, "--raw", &path("raw2"), "--out", &path("data2")]),
        0,
    );
    assert_exit(
        &gaaf(&["train", "--config", cfg_s, "--data", &path("data2"), "--out", &path("models2")]),
        0,
    );
    for f in ["fold0.gckp", "fold1.gckp", "split.json", "history.json"] {
        let a = std::fs::read(dir.path().join("models").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("models2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let a = std::fs::read(dir.path().join("data/manifest.json")).unwrap();
    let b = std::fs::read(dir.path().join("data2/manifest.json")).unwrap();
    assert_eq!(a, b, "manifest differs between identical runs");
}

#[test]
fn flag_overrides_change_the_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    write_tiny_config(&cfg);
    let cfg_s = cfg.to_str().unwrap();
    let path = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    assert_exit(&gaaf(&["synth", "--config", cfg_s, "--out", &path("a")]), 0);
    // Same config, overridden seed: different phantoms.
    assert_exit(
        &gaaf(&["synth", "--config", cfg_s, "--seed", "77", "--out", &path("b")]),
        0,
    );
    let a = std::fs::read(dir.path().join("a/synth_manifest.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/synth_manifest.json")).unwrap();
    assert_ne!(a, b);
    let b_text = String::from_utf8(b).unwrap();
    assert!(b_text.contains("\"seed\": 77"), "{b_text}");
}
