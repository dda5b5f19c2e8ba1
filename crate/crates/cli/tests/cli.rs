use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn paranet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paranet"))
        .args(args)
        .env("PARANET_THREADS", "1")
        .output()
        .expect("spawn paranet")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one_with_usage() {
    let out = paranet(&["flops", "--label", "PN3-dqd"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));
    let out = paranet(&["train", "--label", "PN3-ddd"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(paranet(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = paranet(&["eval", "--ckpt", s(&dir.path().join("missing")), "--synth", "n=8,classes=2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn flops_table_lists_three_exits() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flops.csv");
    let out = paranet(&["flops", "--label", "PN3cut-ddd", "--out", s(&csv)]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "exit,flops,params");
    assert_eq!(lines.len(), 4);
    assert_eq!(fs::read_to_string(&csv).unwrap(), stdout);
    assert!(dir.path().join("flops.invocation.json").exists());
}

#[test]
fn train_sweep_and_rerun_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let synth = "n=32,classes=4,size=16,seed=2";
    let out = paranet(&[
        "train", "--label", "PN3-x3d", "--synth", synth, "--growth", "4", "--layers-per-block", "1", "--batch", "8",
        "--epochs", "2", "--out", s(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("invocation.json").exists());
    let ckpt = run.join("checkpoint");
    let sweep = dir.path().join("sweep.csv");
    let out = paranet(&[
        "sweep", "--ckpt", s(&ckpt), "--synth", synth, "--tau1", "0.3,0.9", "--tau2", "0.5,2", "--out", s(&sweep),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read(&sweep).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 5);
    fs::remove_file(&sweep).unwrap();
    let out = paranet(&["rerun", s(&dir.path().join("sweep.invocation.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&sweep).unwrap(), first);

    let anytime = dir.path().join("anytime.csv");
    let out = paranet(&["anytime", "--ckpt", s(&ckpt), "--synth", synth, "--out", s(&anytime)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::read_to_string(&anytime).unwrap().starts_with("exit,flops,accuracy"));
}
