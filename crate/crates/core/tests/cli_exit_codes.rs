use std::path::Path;
use std::process::{Command, Output};

fn sgce(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgce"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sgce(&[], dir.path())), 1);
    assert_eq!(code(&sgce(&["train", "--data", "d"], dir.path())), 1);
    assert_eq!(code(&sgce(&["synth", "--out", "d", "--n", "x", "--size", "16", "--seed", "1"], dir.path())), 1);
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgce(&["--help"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("skeletonize"));
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgce(&["skeletonize", "--in", "absent.png", "--out", "s.png"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(!out.stderr.is_empty());
    let out = sgce(&["train", "--data", "absent", "--out", "run", "--seed", "1"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn skeletonize_and_expand_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    assert_eq!(code(&sgce(&["synth", "--out", "data", "--n", "2", "--size", "16", "--seed", "3"], cwd)), 0);
    let glyph = "data/B/0000.png";
    assert_eq!(code(&sgce(&["skeletonize", "--in", glyph, "--out", "s.png"], cwd)), 0);
    assert_eq!(code(&sgce(&["expand", "--in", glyph, "--out", "e.sgce"], cwd)), 0);
    let skeleton = sgce::imgcore::read_png(&cwd.join("s.png")).unwrap();
    assert_eq!((skeleton.width(), skeleton.height()), (16, 16));
    assert!(cwd.join("e.sgce").metadata().unwrap().len() > 4 * 16 * 16 * 4);
}

#[test]
fn bad_threshold_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    sgce(&["synth", "--out", "data", "--n", "1", "--size", "16", "--seed", "3"], cwd);
    let out = sgce(&["skeletonize", "--in", "data/A/0000.png", "--out", "s.png", "--threshold", "1.5"], cwd);
    assert_eq!(code(&out), 1);
}
