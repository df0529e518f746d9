use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mtsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtsnet")).args(args).env("MTSNET_THREADS", "2").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, n: usize, seed: u64, size: usize) {
    let o = mtsnet(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--subjects",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--size",
        &size.to_string(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key)?.trim_start().strip_prefix('=').map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("{key} missing from\n{report}"))
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&mtsnet(&[])), 2);
    assert_eq!(code(&mtsnet(&["frobnicate"])), 2);
    assert_eq!(code(&mtsnet(&["params", "--attention", "bogus"])), 2);
    assert_eq!(code(&mtsnet(&["params", "--model", "mtsnet", "--attention", "none"])), 2);
    assert_eq!(code(&mtsnet(&["params", "--model", "r2p1d", "--attention", "mhsa3d", "--variant", "A"])), 2);
}

#[test]
fn synth_is_deterministic_and_handles_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 6, 9, 16);
    synth(&b, 6, 9, 16);
    let labels = fs::read(a.join("labels.csv")).unwrap();
    assert_eq!(labels, fs::read(b.join("labels.csv")).unwrap());
    assert_eq!(fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count(), 6);

    let empty = tmp.path().join("empty");
    synth(&empty, 0, 0, 16);
    let text = fs::read_to_string(empty.join("labels.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn synth_to_unwritable_path_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("file");
    fs::write(&file, "x").unwrap();
    let o = mtsnet(&["synth", "--out", file.join("sub").to_str().unwrap(), "--subjects", "1"]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());
}

#[test]
fn params_table_and_ablation() {
    let o = mtsnet(&["params", "--model", "r2p1d", "--attention", "mhsa3d"]);
    assert_eq!(code(&o), 0);
    let total = stdout(&o).lines().find(|l| l.starts_with("total")).unwrap().to_string();
    let n: f64 = total.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((n / 17.41e6 - 1.0).abs() < 0.05, "{total}");

    let o = mtsnet(&["params", "--ablation"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 5);
}

#[test]
fn gradcheck_exit_status_follows_tolerance() {
    assert_eq!(code(&mtsnet(&["gradcheck", "--op", "conv3d", "--trials", "20", "--tolerance", "1e-3"])), 0);
    assert_eq!(code(&mtsnet(&["gradcheck", "--op", "dep_mhsa", "--trials", "3"])), 0);
    assert_eq!(code(&mtsnet(&["gradcheck", "--op", "conv3d", "--trials", "3", "--tolerance", "0"])), 1);
    assert_eq!(code(&mtsnet(&["gradcheck", "--op", "nope"])), 2);
}

#[test]
fn malformed_dataset_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    synth(&data, 4, 0, 16);
    fs::remove_file(data.join("subj_0001").join("frame_003.pgm")).unwrap();
    let o = mtsnet(&["train", "--data", data.to_str().unwrap(), "--out", tmp.path().join("c").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    fs::write(data.join("labels.csv"), "subject_id,label\nsubj_0000,7\n").unwrap();
    let o = mtsnet(&["eval", "--data", data.to_str().unwrap(), "--ckpt", tmp.path().to_str().unwrap()]);
    assert_ne!(code(&o), 0);
}

#[test]
fn train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let ckpt = tmp.path().join("c");
    synth(&data, 120, 5, 16);
    let (data_s, ckpt_s) = (data.to_str().unwrap(), ckpt.to_str().unwrap());

    let conflict = mtsnet(&["train", "--data", data_s, "--out", ckpt_s, "--attention", "mhsa3d", "--variant", "B"]);
    assert_eq!(code(&conflict), 2);

    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# fresh weights\nepochs = 0\nwidth-div = 8\nseed = 1\n").unwrap();
    let o = mtsnet(&["train", "--data", data_s, "--out", ckpt_s, "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(ckpt.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1, "epochs 0 leaves only the header");

    let first = mtsnet(&["eval", "--data", data_s, "--ckpt", ckpt_s, "--split", "test"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let second = mtsnet(&["eval", "--data", data_s, "--ckpt", ckpt_s, "--split", "test"]);
    assert_eq!(first.stdout, second.stdout);
    let report = stdout(&first);
    assert_eq!(value(&report, "n"), 100.0);
    let acc = value(&report, "accuracy");
    assert!((0.35..=0.65).contains(&acc), "fresh model accuracy {acc}");

    let o = mtsnet(&["eval", "--data", data_s, "--ckpt", ckpt_s, "--model", "r2p1d", "--width-div", "8"]);
    assert_eq!(code(&o), 4);

    let other = tmp.path().join("d32");
    synth(&other, 4, 5, 32);
    let o = mtsnet(&["eval", "--data", other.to_str().unwrap(), "--ckpt", ckpt_s, "--split", "all"]);
    assert_eq!(code(&o), 4);

    let manifest = fs::read_to_string(ckpt.join("manifest.txt")).unwrap();
    fs::write(ckpt.join("manifest.txt"), manifest.replace("num_classes = 1", "num_classes = 2")).unwrap();
    let o = mtsnet(&["eval", "--data", data_s, "--ckpt", ckpt_s]);
    assert_eq!(code(&o), 4);
}

#[test]
fn selftest_passes() {
    let o = mtsnet(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}
