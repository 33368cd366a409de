//! Smoke tests of the CLI surface: exit codes and usage handling.

use std::process::Command;

fn zrigf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_zrigf"))
}

#[test]
fn help_exits_zero() {
    let out = zrigf().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "synth-data",
        "contrastive-pretrain",
        "build-index",
        "retrieve",
        "annotate-corpus",
        "generative-pretrain",
        "generate",
        "evaluate",
        "ablate",
        "grad-check",
    ] {
        assert!(text.contains(sub), "missing subcommand {sub} in help");
    }
}

#[test]
fn evaluate_help_exits_zero() {
    let out = zrigf().args(["evaluate", "--help"]).output().unwrap();
    assert!(out.status.success());
}

#[test]
fn unknown_subcommand_exits_two() {
    let out = zrigf().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flag_exits_two() {
    let out = zrigf().args(["synth-data", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn retrieve_k_zero_is_usage_error() {
    let out = zrigf()
        .args(["retrieve", "--checkpoint", "x", "--index", "y", "--text", "z", "--k", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("0"), "{err}");
}

#[test]
fn missing_file_is_runtime_error_exit_one() {
    let out = zrigf()
        .args([
            "retrieve",
            "--checkpoint",
            "/nonexistent/ckpt",
            "--index",
            "/nonexistent/idx",
            "--text",
            "hello",
            "--k",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn synth_data_writes_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("data");
    let out = zrigf()
        .args([
            "synth-data",
            "--out",
            out_dir.to_str().unwrap(),
            "--concepts",
            "2",
            "--images-per-concept",
            "3",
            "--dialogues-per-concept",
            "2",
            "--heldout-pairs",
            "1",
            "--eval-dialogues",
            "1",
            "--seed",
            "5",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "pairs.train.jsonl",
        "pairs.heldout.jsonl",
        "dialogues.train.jsonl",
        "dialogues.eval.jsonl",
        "concepts.json",
    ] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    assert_eq!(std::fs::read_dir(out_dir.join("images")).unwrap().count(), 6);
}

#[test]
fn synth_data_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = zrigf()
            .args([
                "synth-data",
                "--out",
                out_dir.to_str().unwrap(),
                "--concepts",
                "2",
                "--images-per-concept",
                "2",
                "--dialogues-per-concept",
                "2",
                "--seed",
                "9",
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
        let mut blob = Vec::new();
        for f in ["pairs.train.jsonl", "dialogues.train.jsonl"] {
            blob.extend(std::fs::read(out_dir.join(f)).unwrap());
        }
        blob.extend(std::fs::read(out_dir.join("images/synth-0000.ppm")).unwrap());
        blob
    };
    assert_eq!(run("a"), run("b"));
}
