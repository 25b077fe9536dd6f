use std::path::Path;
use std::process::{Command, Output};

use taskquant::checkpoint;
use taskquant::harness::read_csv;

const BIN: &str = env!("CARGO_BIN_EXE_taskquant");

const SMALL_DETECTION: &str = "task = detection
rates = 1
snr_db = 8
train_size = 200
eval_size = 400
epochs = 3
hidden_width = 8
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let unknown = write(d, "unknown.cfg", "task = detection\nspeed = 3\n");
    let bad_value = write(d, "bad.cfg", "task = detection\nepochs = -1\n");
    let cases: Vec<Vec<&str>> = vec![
        vec!["sweep"],
        vec!["sweep", "--config", "missing.cfg"],
        vec!["sweep", "--config", &unknown],
        vec!["sweep", "--config", &bad_value],
    ];
    for args in cases {
        assert_eq!(run(d, &args).status.code(), Some(2), "{args:?}");
    }
    let ok = write(d, "ok.cfg", SMALL_DETECTION);
    assert_eq!(run(d, &["train", "--config", &ok, "--mode", "hard"]).status.code(), Some(2));
    assert_eq!(run(d, &["train", "--config", &ok]).status.code(), Some(2), "train needs --out");
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "div.cfg", &format!("{SMALL_DETECTION}variants = passing\nlearning_rate = 1e9\n"));
    assert_eq!(run(d, &["train", "--config", &cfg, "--out", "x.ckpt"]).status.code(), Some(3));

    let cfg = write(
        d,
        "div-est.cfg",
        "task = channel-est\nresolutions = 4\ntrain_size = 256\neval_size = 64\nepochs = 5\nlearning_rate = 10\n",
    );
    let out = run(d, &["sweep", "--config", &cfg, "--out", "sweep.csv"]);
    assert_eq!(out.status.code(), Some(3));
    let result = read_csv(&d.join("sweep.csv")).unwrap();
    assert!(result.find("resolution=4", "soft", "failed").is_some());
    assert!(result.find("resolution=4", "limit", "mse").is_some());
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "small.cfg", SMALL_DETECTION);

    let out = run(d, &["gen", "--config", &cfg, "--out", "data.csv"]);
    assert!(out.status.success());
    let data = std::fs::read_to_string(d.join("data.csv")).unwrap();
    let mut lines = data.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 4 + 12);
    assert_eq!(lines.count(), 200);

    let out = run(d, &["train", "--config", &cfg, "--mode", "soft", "--out", "model.ckpt"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let net = checkpoint::load(&d.join("model.ckpt")).unwrap();
    assert_eq!(net.bank().stage().name(), "hard");
    assert_eq!((net.input_dim(), net.output_dim()), (12, 16));

    let out = run(d, &["eval", "--config", &cfg, "--checkpoint", "model.ckpt", "--out", "eval.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result = read_csv(&d.join("eval.csv")).unwrap();
    let ber = result.find("rate=1;snr_db=8", "checkpoint", "ber").unwrap();
    assert!((0.0..=1.0).contains(&ber.value));
    assert_eq!(result.find("-", "checkpoint", "total_bits").unwrap().value, 12.0);
}

#[test]
fn sweep_writes_csv_to_stdout_and_seed_flag_changes_it() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "small.cfg", &format!("{SMALL_DETECTION}variants = soft\n"));
    let a = run(d, &["sweep", "--config", &cfg]);
    let b = run(d, &["sweep", "--config", &cfg, "--seed", "2"]);
    assert!(a.status.success() && b.status.success());
    let a = String::from_utf8(a.stdout).unwrap();
    let b = String::from_utf8(b.stdout).unwrap();
    assert!(a.starts_with("sweep_var,variant,metric,value,stderr,seed,config_digest\n"));
    assert_ne!(a, b);
    assert!(a.lines().any(|l| l.contains(",map,ber,")));
}

#[test]
fn baseline_skips_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write(d, "small.cfg", SMALL_DETECTION);
    let out = run(d, &["baseline", "--config", &cfg, "--out", "base.csv"]);
    assert!(out.status.success());
    let result = read_csv(&d.join("base.csv")).unwrap();
    assert!(result.find("rate=1;snr_db=8", "map", "ber").is_some());
    assert!(result.rows.iter().all(|r| r.metric != "train_loss"));
}
