use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn deskmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deskmt")).args(args).output().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn tiny() -> String {
    fixture("tiny.toml").to_string_lossy().into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

#[test]
fn validate_reports_every_violation_with_exit_2() {
    assert_eq!(code(&deskmt(&["validate", "--manifest", &tiny()])), 0);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = fs::read_to_string(fixture("tiny.toml")).unwrap().replace("seed = 11\n", "").replace("k = 1", "k = 3");
    fs::write(&bad, text).unwrap();
    let out = deskmt(&["validate", "--manifest", &bad.to_string_lossy()]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed") && err.contains("distillation groups"), "{err}");
}

#[test]
fn run_rerun_and_stage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("exp");
    let out = out_dir.to_string_lossy().into_owned();

    let early = deskmt(&["distill", "--manifest", &tiny(), "--out", &out, "--jobs", "1"]);
    assert_eq!(code(&early), 3, "{}", String::from_utf8_lossy(&early.stderr));

    let first = deskmt(&["run", "--manifest", &tiny(), "--out", &out, "--jobs", "1"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let table = String::from_utf8_lossy(&first.stdout).into_owned();
    assert!(table.contains("xx→yy") && table.contains("Ensemble"), "{table}");
    let tsv = fs::read_to_string(out_dir.join("report.tsv")).unwrap();
    assert!(tsv.starts_with("system\tdirection\tbleu\tdetail\n"));
    assert!(out_dir.join("search/s2t.log").exists());

    let again = deskmt(&["run", "--manifest", &tiny(), "--out", &out]);
    assert_eq!(code(&again), 0);
    assert_eq!(again.stdout, first.stdout);

    let reseeded = deskmt(&["run", "--manifest", &tiny(), "--out", &out, "--seed-override", "5"]);
    assert_eq!(code(&reseeded), 2);
}

#[test]
fn standalone_tools() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();

    let made = deskmt(&["make-data", "--manifest", &tiny(), "--out", &p("data")]);
    assert_eq!(code(&made), 0, "{}", String::from_utf8_lossy(&made.stderr));
    let dev = fs::read_to_string(dir.path().join("data/dev.tsv")).unwrap();
    assert_eq!(dev.lines().count(), 6);

    let src: Vec<String> = fs::read_to_string(dir.path().join("data/parallel.tsv")).unwrap().lines().map(|l| l.split('\t').next().unwrap().to_string()).collect();
    fs::write(dir.path().join("src.txt"), src.join("\n") + "\n").unwrap();
    let bpe = deskmt(&["learn-bpe", &p("src.txt"), "--merges", "20", "--out", &p("bpe.txt")]);
    assert_eq!(code(&bpe), 0, "{}", String::from_utf8_lossy(&bpe.stderr));
    assert!(dir.path().join("bpe.txt").exists());

    let trained = deskmt(&["train", "--manifest", &tiny(), "--model", "a", "--direction", "t2s", "--out", &p("a.t2s")]);
    assert_eq!(code(&trained), 0, "{}", String::from_utf8_lossy(&trained.stderr));
    let step2 = p("a.t2s/step_2.ckpt");
    let step4 = p("a.t2s/step_4.ckpt");
    assert_eq!(code(&deskmt(&["average", &step2, &step4, "--out", &p("avg.ckpt")])), 0);

    let tgt: Vec<String> = dev.lines().map(|l| l.split('\t').nth(1).unwrap().to_string()).collect();
    fs::write(dir.path().join("mono.txt"), tgt.join("\n") + "\n").unwrap();
    let bt = deskmt(&["backtranslate", "--model", &p("avg.ckpt"), "--vocab", &p("data/vocab.txt"), "--input", &p("mono.txt"), "--tag", "--beam", "2", "--out", &p("bt.tsv")]);
    assert_eq!(code(&bt), 0, "{}", String::from_utf8_lossy(&bt.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("bt.tsv")).unwrap().lines().count(), 6);

    fs::write(dir.path().join("ref.txt"), "the cat sat on a mat\n").unwrap();
    fs::write(dir.path().join("hyp.txt"), "the cat sat on the mat\n").unwrap();
    let scored = deskmt(&["score", "--reference", &p("ref.txt"), "--hypothesis", &p("hyp.txt")]);
    assert_eq!(code(&scored), 0);
    assert!(String::from_utf8_lossy(&scored.stdout).starts_with("BLEU 53.73"), "{}", String::from_utf8_lossy(&scored.stdout));

    let decoded = deskmt(&["score", "--reference", &p("data/dev.tsv"), "--model", &step4, "--vocab", &p("data/vocab.txt"), "--beam", "2"]);
    assert_eq!(code(&decoded), 0, "{}", String::from_utf8_lossy(&decoded.stderr));
}
