use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use ddnn_core::checkpoint::Checkpoint;

fn ddnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddnn"))
        .args(args)
        .env_remove("DDNN_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .display()
        .to_string()
}

fn smoke_run(dir: &Path, extra: &[&str]) -> (Output, Duration) {
    let cfg = config("ddnn_r20_16.cfg");
    let out = dir.display().to_string();
    let mut args = vec!["--config", &cfg, "--set", "epochs=1", "--out", &out, "--deterministic"];
    args.extend_from_slice(extra);
    args.push("train");
    let t = Instant::now();
    let o = ddnn(&args);
    (o, t.elapsed())
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let o = ddnn(&["--set", "no_such_key=3", "count"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
}

#[test]
fn bad_values_and_flags_are_usage_errors() {
    assert_eq!(ddnn(&["--set", "epochs=many", "count"]).status.code(), Some(2));
    assert_eq!(ddnn(&["--set", "epochs", "count"]).status.code(), Some(2));
    assert_eq!(ddnn(&["count", "--bogus"]).status.code(), Some(2));
    assert_eq!(ddnn(&["frobnicate"]).status.code(), Some(2));
    // cifar without a data directory cannot be configured
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(ddnn(&["--out", &out, "train"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let o = ddnn(&["--config", "/definitely/not/here.cfg", "count"]);
    assert_eq!(o.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = ddnn(&[
        "extract",
        "--checkpoint",
        junk.to_str().unwrap(),
        "--subnet",
        "1",
        "--output",
        "/tmp/x",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn count_resnet34() {
    let o = ddnn(&["--config", &config("resnet34_18.cfg"), "count"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let full = text.lines().find(|l| l.starts_with("full")).unwrap();
    let cols: Vec<&str> = full.split('\t').collect();
    assert_eq!(cols[1], "ResNet-34");
    let params: f64 = cols[3].trim_end_matches('M').parse().unwrap();
    let flops: f64 = cols[4].trim_end_matches('G').parse().unwrap();
    assert!((params - 21.8).abs() / 21.8 <= 0.01, "{full}");
    assert!((flops - 3.6).abs() / 3.6 <= 0.05, "{full}");
    let sub = text.lines().find(|l| l.starts_with("sub1")).unwrap();
    assert!(sub.contains("ResNet-18") && sub.contains("11.69M"), "{sub}");
}

#[test]
fn smoke_train_writes_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (o, took) = smoke_run(dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(took < Duration::from_secs(60), "smoke run took {took:?}");
    for f in [
        "resolved.cfg",
        "metrics.csv",
        "best_full.ckpt",
        "best_sub1.ckpt",
        "last.ckpt",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let resolved = fs::read_to_string(dir.path().join("resolved.cfg")).unwrap();
    assert!(resolved.contains("epochs = 1"));
    assert!(resolved.contains("deterministic = true"));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4, "{metrics}");
    let meta = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap().metadata;
    assert_eq!(meta["seed"], "0");
    assert_eq!(meta["config_hash"].len(), 16);
}

#[test]
fn deterministic_runs_write_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(smoke_run(a.path(), &["--seed", "5"]).0.status.success());
    assert!(smoke_run(b.path(), &["--seed", "5"]).0.status.success());
    let read = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let ckpt = |d: &Path| fs::read(d.join("last.ckpt")).unwrap();
    assert_eq!(ckpt(a.path()), ckpt(b.path()));
}

fn eval_lines(ckpt: &Path) -> Vec<String> {
    let o = ddnn(&[
        "--config",
        &config("ddnn_r20_16.cfg"),
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    stdout(&o).lines().skip(1).map(String::from).collect()
}

#[test]
fn extracted_subnet_evaluates_like_the_ddnn() {
    let dir = tempfile::tempdir().unwrap();
    assert!(smoke_run(dir.path(), &[]).0.status.success());
    let last = dir.path().join("last.ckpt");
    let sub = dir.path().join("sub1.ckpt");
    let o = ddnn(&[
        "extract",
        "--checkpoint",
        last.to_str().unwrap(),
        "--subnet",
        "1",
        "--output",
        sub.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("dropped blocks: stage2:{3} stage3:{3}"), "{text}");
    assert!(
        text.contains("params:") && text.contains("flops:") && text.contains('%'),
        "{text}"
    );

    let in_ddnn = eval_lines(&last);
    let alone = eval_lines(&sub);
    assert_eq!(alone.len(), 1);
    // same error and loss; only the net label differs
    let tail = |l: &str| l.split('\t').skip(1).collect::<Vec<_>>().join("\t");
    assert_eq!(tail(&alone[0]), tail(&in_ddnn[1]));

    let o = ddnn(&[
        "extract",
        "--checkpoint",
        last.to_str().unwrap(),
        "--subnet",
        "2",
        "--output",
        "/tmp/never",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn extracting_the_full_net_keeps_its_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = smoke_run(
        dir.path(),
        &["--set", "classifier_mode=private", "--set", "subnets=3,2,2;2,2,2"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let last = dir.path().join("last.ckpt");
    let full = dir.path().join("full.ckpt");
    let o = ddnn(&[
        "extract",
        "--checkpoint",
        last.to_str().unwrap(),
        "--subnet",
        "0",
        "--output",
        full.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("dropped blocks: none"));

    let src = Checkpoint::load(&last).unwrap();
    let out = Checkpoint::load(&full).unwrap();
    let mut expected = src.tensors.clone();
    expected.retain(|name, _| !name.starts_with("classifier_sub"));
    assert!(expected.len() < src.tensors.len());
    assert_eq!(out.tensors, expected);

    // extracting again is a fixed point, byte for byte
    let again = dir.path().join("again.ckpt");
    let o = ddnn(&[
        "extract",
        "--checkpoint",
        full.to_str().unwrap(),
        "--subnet",
        "0",
        "--output",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(fs::read(&full).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn plot_two_rows_gives_two_series() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    fs::write(
        &csv,
        "epoch,net_name,split,top1_err,ce,kl,att_mse,total,lr,wall_secs\n\
         0,full,test,40,1.2,0,0,1.5,0.1,0\n\
         0,sub1,test,45,1.3,0.1,2,1.5,0.1,0\n",
    )
    .unwrap();
    let svg: PathBuf = dir.path().join("m.svg");
    let o = ddnn(&[
        "plot",
        "--metrics",
        csv.to_str().unwrap(),
        "--output",
        svg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg"));
    assert_eq!(text.matches("<polyline").count(), 2);
}

#[test]
fn gradcheck_all_passes() {
    let o = ddnn(&["gradcheck", "all"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains(" 0 failed"));
    assert_eq!(ddnn(&["gradcheck", "no_case_has_this_name"]).status.code(), Some(2));
}
