mod common;

use common::cli::{replay_all, tclab};

fn code(args: &[&str]) -> i32 {
    tclab(args).status.code().expect("exit code")
}

#[test]
fn every_subcommand_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    for (label, same, n) in replay_all(dir.path()) {
        assert!(n > 0, "{label} wrote nothing");
        assert!(same, "{label} differs on replay");
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&["gen-matrices", "--nope"]), 2);
    assert_eq!(code(&["--out-dir", out, "gen-matrices", "--levels", "4..2"]), 2);
    assert_eq!(code(&["--out-dir", out, "--scale", "huge", "gen-matrices"]), 2);
    assert_eq!(code(&["--out-dir", out, "train-corrector", "--dataset", "/no/such.csv"]), 2);
    assert_eq!(code(&["--config", "/no/such/config.json"]), 2);
    assert_eq!(code(&["--out-dir", out, "experiment", "robustness"]), 2);
}

#[test]
fn missing_head_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let ok = tclab(&[
        "--out-dir", &p("d"), "gen-dataset", "--levels", "1,2", "--per-level", "1", "--kinds", "mine", "--iters", "60",
        "--batch", "16", "--critic-hidden", "4",
    ]);
    assert!(ok.status.success());
    let out = tclab(&["--out-dir", &p("t"), "train-corrector", "--dataset", &p("d/dataset.csv"), "--heads", "mine,infonce"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infonce"));
}

#[test]
fn env_var_sets_default_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_tclab"))
        .args(["gen-matrices", "--per-level", "1", "--levels", "2"])
        .env("TC_LAB_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("matrices.json").exists());
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn worker_count_does_not_change_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let run = |jobs: &str| {
        let out = dir.path().join(format!("j{jobs}"));
        let st = tclab(&[
            "--jobs", jobs, "--out-dir", out.to_str().unwrap(), "gen-dataset", "--levels", "1..3", "--per-level", "2",
            "--kinds", "nwj,club", "--iters", "90", "--batch", "16", "--critic-hidden", "4", "--club-hidden", "4",
        ]);
        assert!(st.status.success());
        std::fs::read(out.join("dataset.csv")).unwrap()
    };
    assert_eq!(run("1"), run("3"));
}
