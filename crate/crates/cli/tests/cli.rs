//! The binary end to end on a tiny world, and its exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
methods = ["ICL-CA", "FT-C"]
r_sub = [1.0]
seeds = [0]
timing_samples = 2

[sizes]
train = 90
val = 30
test = 45

[pretext]
size = 60

[encoder]
d = 8
heads = 2
layers = 1
pretrain_steps = 5

[icl]
q = 2
layers = 1
heads = 2
max_epochs = 2

[baseline]
max_epochs = 2
"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icl-borrow")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    cli(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn staged_commands_train_and_evaluate_one_cell() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let (data, enc, caches, ckpt) = (d.join("data"), d.join("enc.ckpt"), d.join("caches"), d.join("ca.ckpt"));

    assert!(ok(&["gen", "--config", s(&cfg), "--out", s(&data)]).contains("90 train"));
    assert!(data.join("train.bin").is_file());
    assert!(ok(&["pretrain", "--config", s(&cfg), "--out", s(&enc)]).starts_with("encoder checksum"));
    assert_eq!(ok(&["cache", "--config", s(&cfg), "--data", s(&data), "--encoder", s(&enc), "--out", s(&caches)]).lines().count(), 3);

    let model = ["--data", s(&data), "--encoder", s(&enc), "--cache-dir", s(&caches)];
    let train = [&["train", "--config", s(&cfg), "--out", s(&ckpt)][..], &model[..]].concat();
    assert!(ok(&train).starts_with("ICL-CA\ttrainable_parameters\t"));
    let eval = [&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)][..], &model[..]].concat();
    let records = ok(&eval);
    assert!(records.lines().count() > 1);
    assert!(records.lines().skip(1).all(|l| l.starts_with("ICL-CA\t")));

    // A head checkpoint is not a baseline checkpoint.
    let wrong = [&eval[..], &["--method", "FT-C"][..]].concat();
    assert_eq!(code(&wrong), 3);
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    assert_eq!(ok(&["run", "--config", s(&cfg), "--out", s(&out)]).trim(), "2 cells, 0 skipped");
    assert!(out.join("results.tsv").is_file());
    assert!(ok(&["report", s(&out)]).starts_with("2 summary rows, 2 curve files"));
    assert!(out.join("report").join("metric_vs_rsub_all.svg").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.toml");
    fs::write(&bad, "[sizes]\ntrain = 0\n").unwrap();
    assert_eq!(code(&["gen", "--config", s(&bad), "--out", s(&d.join("x"))]), 2);
    assert_eq!(code(&["gen"]), 2, "missing --out");
    assert_eq!(code(&["ablate", "--kind", "nonsense", "--out", s(d)]), 2);
    assert_eq!(code(&["report", s(&d.join("nothing"))]), 2);

    let junk = d.join("junk.ckpt");
    fs::write(&junk, b"ICLE not really").unwrap();
    assert_eq!(code(&["index", "--cache", s(&junk)]), 3);
    assert_eq!(code(&["cache", "--data", s(d), "--encoder", s(&junk), "--out", s(d)]), 3);
}
