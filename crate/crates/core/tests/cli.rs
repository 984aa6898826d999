use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fp4lab::experiments::ExperimentConfig;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lab"))
        .args(args)
        .env("LAB_WORKERS", "1")
        .output()
        .expect("lab runs")
}

#[rustfmt::skip]
const TINY: [&str; 16] = [
    "--override", "model.d_model=16",
    "--override", "model.n_heads=2",
    "--override", "model.head_dim=8",
    "--override", "model.ffn_dim=32",
    "--override", "model.n_layers=1",
    "--override", "model.seq_len=8",
    "--override", "steps=2",
    "--override", "synthetic_bytes=65536",
];

#[test]
fn shipped_configs_match_presets() {
    for (name, preset) in ExperimentConfig::presets() {
        let path = configs().join(format!("{name}.toml"));
        let shipped = ExperimentConfig::load(&path, &[]).unwrap();
        assert_eq!(shipped, preset, "{name}");
    }
}

#[test]
fn tiny_train_run_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = configs().join("desk-gpt-nvfp4.toml");
    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
        "--override",
        "batch_size=2",
    ];
    args.extend(TINY);
    let o = lab(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "loss.csv",
        "eval.csv",
        "model.ckpt",
        "config.toml",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["seeds"], serde_json::json!([3]));
}

#[test]
fn exit_codes() {
    let cfg = configs().join("desk-ngpt-off.toml");
    let cfg = cfg.to_str().unwrap();

    // usage error
    assert_eq!(lab(&["train"]).status.code(), Some(2));
    assert_eq!(lab(&["dance", "--config", cfg]).status.code(), Some(4));
    assert_eq!(
        lab(&["train", "--config", cfg, "--override", "model.d_model=-4"])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        lab(&["train", "--config", cfg, "--override", "bogus_key=1"])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        lab(&["landscape", "--config", cfg]).status.code(),
        Some(3),
        "landscape without checkpoints"
    );
    assert_eq!(
        lab(&["train", "--config", "/no/such.toml"]).status.code(),
        Some(6)
    );

    let file = tempfile::NamedTempFile::new().unwrap();
    let blocked = file.path().join("out");
    let mut args = vec!["train", "--config", cfg, "--out", blocked.to_str().unwrap()];
    args.extend(TINY);
    assert_eq!(lab(&args).status.code(), Some(5));
}
