use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedl::network::Ablation;
use fedl_cli::checkpoint::{self, CheckpointError, FORMAT_VERSION};
use tempfile::TempDir;

fn fedl(args: &[&str]) -> Output {
    fedl_env(args, &[])
}

fn fedl_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedl"));
    cmd.args(args).env_remove("FEDL_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("train.csv");
        let o = fedl(&[
            "synth", "--out", s(&data), "--classes", "3", "--per-class", "80", "--dim", "4",
            "--ambiguous", "0", "--ood", "40", "--seed", "5",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Self { dir, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec!["train", "--data", s(&self.data), "--out", s(out), "--epochs", "3", "--quiet"];
        args.extend_from_slice(extra);
        fedl(&args)
    }
}

fn assert_json_error(o: &Output, code: i32) -> serde_json::Value {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let line = err.trim();
    assert_eq!(line.lines().count(), 1, "error is one line: {line}");
    let v: serde_json::Value = serde_json::from_str(line).expect("error line is JSON");
    assert_eq!(v["exit_code"], code);
    v
}

#[test]
fn train_then_eval_predict_ood() {
    let fx = Fixture::new();
    let ck = fx.path("m.ckpt");
    let o = fx.train(&ck, &["--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(recs.iter().any(|r| r["metric"] == "val_accuracy"));
    assert!(recs.iter().all(|r| r["seed"] == 3 && r["task"] == "train"));

    let o = fedl(&["eval", "--model", s(&ck), "--data", s(&fx.data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let acc = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|r| r["metric"] == "accuracy")
        .expect("accuracy record");
    let acc = acc["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let o = fedl(&["predict", "--model", s(&ck), "--data", s(&fx.data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3 * 80 + 40);
    let first: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(first["alpha"].as_array().unwrap().len(), 3);

    let o = fedl(&["ood", "--model", s(&ck), "--data", s(&fx.data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("auroc"));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let fx = Fixture::new();
    let ck_path = fx.path("m.ckpt");
    assert!(fx.train(&ck_path, &["--seed", "2"]).status.success());
    let ck = checkpoint::load(&ck_path).unwrap();
    assert!(!ck.probe_inputs.is_empty());
    assert_eq!(ck.optimizer.m.len(), ck.params.flatten().len());
    let again = fx.path("again.ckpt");
    checkpoint::save(&again, &ck).unwrap();
    assert_eq!(std::fs::read(&ck_path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(checkpoint::load(&again).unwrap(), ck);
}

#[test]
fn rejects_future_version_and_corruption() {
    let fx = Fixture::new();
    let ck_path = fx.path("m.ckpt");
    assert!(fx.train(&ck_path, &[]).status.success());
    let bytes = std::fs::read(&ck_path).unwrap();

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match checkpoint::decode(&future) {
        Err(CheckpointError::UnsupportedVersion { found, supported }) => {
            assert_eq!((found, supported), (FORMAT_VERSION + 1, FORMAT_VERSION));
        }
        other => panic!("expected a version error, got {other:?}"),
    }
    let future_path = fx.path("future.ckpt");
    std::fs::write(&future_path, &future).unwrap();
    let v = assert_json_error(&fedl(&["eval", "--model", s(&future_path), "--data", s(&fx.data)]), 2);
    assert!(v["message"].as_str().unwrap().contains("version"));

    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    assert!(matches!(checkpoint::decode(&flipped), Err(CheckpointError::Corrupt(_))));

    assert!(matches!(checkpoint::decode(b"NOTACKPT\x01\x00\x00\x00"), Err(CheckpointError::BadMagic)));
    assert!(checkpoint::decode(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn ablation_is_recorded() {
    let fx = Fixture::new();
    let ck_path = fx.path("fixtau.ckpt");
    let o = fx.train(&ck_path, &["--ablation", "fix_tau"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = checkpoint::load(&ck_path).unwrap();
    assert_eq!(ck.meta.net_config.ablation, Ablation::FixTau);
    let o = fedl(&["predict", "--model", s(&ck_path), "--data", s(&fx.data)]);
    let row: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(row["tau"], 1.0);
}

#[test]
fn config_precedence() {
    let fx = Fixture::new();
    let cfg = fx.path("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"max_epochs": 2, "batch_size": 16, "seed": 40}}"#).unwrap();

    let a = fx.path("a.ckpt");
    let o = fedl_env(
        &["train", "--data", s(&fx.data), "--out", s(&a), "--config", s(&cfg), "--epochs", "1", "--quiet"],
        &[("FEDL_SEED", "77")],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let meta = checkpoint::load(&a).unwrap().meta;
    assert_eq!(meta.train_config.max_epochs, 1);
    assert_eq!(meta.train_config.batch_size, 16);
    assert_eq!(meta.seed, 40);

    let b = fx.path("b.ckpt");
    let o = fedl_env(&["train", "--data", s(&fx.data), "--out", s(&b), "--epochs", "1", "--quiet"], &[("FEDL_SEED", "77")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta = checkpoint::load(&b).unwrap().meta;
    assert_eq!(meta.seed, 77);
    assert_eq!(meta.train_config.batch_size, 64);
}

#[test]
fn same_seed_same_checkpoint() {
    let fx = Fixture::new();
    let (a, b) = (fx.path("a.ckpt"), fx.path("b.ckpt"));
    assert!(fx.train(&a, &["--seed", "9"]).status.success());
    assert!(fx.train(&b, &["--seed", "9"]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn sample_is_deterministic() {
    let args = ["sample", "--alpha", "1,2,3", "--p", "0.2,0.3,0.5", "--tau", "2", "--n", "5", "--seed", "4"];
    let (x, y) = (fedl(&args), fedl(&args));
    assert!(x.status.success(), "{}", stderr(&x));
    assert_eq!(stdout(&x), stdout(&y));
    assert_eq!(stdout(&x).lines().count(), 5);
    for line in stdout(&x).lines() {
        let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(v.len(), 3);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let other = fedl(&["sample", "--alpha", "1,2,3", "--p", "0.2,0.3,0.5", "--tau", "2", "--n", "5", "--seed", "5"]);
    assert_ne!(stdout(&x), stdout(&other));
}

#[test]
fn verify_passes() {
    let o = fedl(&["verify", "--seed", "7"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("failed=0"));
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    let ck = fx.path("m.ckpt");

    assert_json_error(&fedl(&["train", "--bogus"]), 1);
    let cfg = fx.path("bad.json");
    std::fs::write(&cfg, r#"{"train": {"learning_rat": 0.1}}"#).unwrap();
    let v = assert_json_error(&fx.train(&ck, &["--config", s(&cfg)]), 1);
    assert!(v["message"].as_str().unwrap().contains("learning_rat"));
    assert_json_error(&fedl(&["sample", "--alpha", "1,2", "--p", "0.5,0.5", "--tau", "-1"]), 1);

    let missing = fx.path("missing.csv");
    assert_json_error(&fedl(&["train", "--data", s(&missing), "--out", s(&ck), "--quiet"]), 2);
    assert_json_error(&fedl(&["eval", "--model", s(&missing), "--data", s(&fx.data)]), 2);

    assert_json_error(&fx.train(&ck, &["--lr", "1e300"]), 4);

    assert!(fedl(&["--help"]).status.success());
}
